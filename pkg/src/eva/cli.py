"""Command-line entry point: ``eva {gen-data,train,eval,ablate,inspect-experts}``.

Settings are resolved in this order, later sources winning:

1. built-in defaults
2. the ``--preset`` (``reference`` or ``micro``)
3. the ``--config`` file (INI sections ``run``, ``data``, ``encoder``, ``train``, ``eval``)
4. command-line flags

The resolved configuration is written to ``config.ini`` in the run directory,
and that file can be passed back through ``--config`` to repeat the run.

Exit codes: 0 success, 1 user or configuration error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ablation, dataset as ds_mod
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .dataset import SplitError, SplitSpec
from .encoders import EncoderConfig
from .evaluator import dump_predictions, evaluate, write_report
from .moe import LoadTracker, load_shares
from .trainer import MICRO_LR, TrainConfig, model_from_checkpoint, train

log = logging.getLogger("eva")

PRESETS = {"reference": {}, "micro": {"lr": MICRO_LR}}
CHECKPOINT_NAME = "checkpoint.eva"


class UserError(Exception):
    """Bad flags, config values or inputs; maps to exit code 1."""


@dataclass
class EvalConfig:
    mode: str = "closed"
    phase: str = "test"
    beta: float = 0.5
    feasibility_threshold: float = -1.0


@dataclass
class RunConfig:
    seed: int = 0
    out: str = ""
    preset: str = "reference"
    data: SplitSpec = field(default_factory=SplitSpec)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def train_config(self, dataset=None) -> TrainConfig:
        encoder = self.encoder
        if dataset is not None:
            # input width and patch count follow the data actually loaded
            _, n_patches, d_in = dataset.tokens["train"].shape
            encoder = dataclasses.replace(encoder, d_in=d_in, seq_len_image=n_patches + 1)
        return dataclasses.replace(self.train, seed=self.seed, encoder=encoder)

    def split_spec(self) -> SplitSpec:
        return dataclasses.replace(self.data, seed=self.seed)


# ---------------------------------------------------------------- config resolution

SECTIONS = ("data", "encoder", "train", "eval")


def _convert(raw: str, default, where: str):
    try:
        if isinstance(default, bool):
            return configparser.ConfigParser.BOOLEAN_STATES[raw.strip().lower()]
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except (KeyError, ValueError):
        raise UserError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw.strip()


def _update(obj, values: dict, where: str):
    names = {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)
             if f.name != "encoder" or not isinstance(obj, TrainConfig)}
    changes = {}
    for key, raw in values.items():
        key = key.replace("-", "_")
        if key not in names:
            raise UserError(f"{where}: unknown key {key!r}")
        changes[key] = _convert(raw, names[key], f"{where}.{key}") if isinstance(raw, str) else raw
    try:
        return dataclasses.replace(obj, **changes)
    except (ValueError, TypeError) as exc:
        raise UserError(f"{where}: {exc}") from None


def read_config_file(path) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser()
    try:
        if not parser.read(path):
            raise UserError(f"config file {path} not found")
    except configparser.Error as exc:
        raise UserError(f"config file {path}: {exc}") from None
    known = set(SECTIONS) | {"run"}
    for section in parser.sections():
        if section not in known:
            raise UserError(f"config file {path}: unknown section [{section}]")
    return {s: dict(parser[s]) for s in parser.sections()}


def resolve(args: argparse.Namespace) -> RunConfig:
    file_values = read_config_file(args.config) if args.config else {}
    run = dict(file_values.get("run", {}))
    preset = args.preset or run.pop("preset", None) or "reference"
    run.pop("preset", None)
    if preset not in PRESETS:
        raise UserError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    cfg = RunConfig(preset=preset)
    cfg.train = _update(cfg.train, PRESETS[preset], "preset")
    for key, raw in run.items():
        if key == "seed":
            cfg.seed = int(_convert(raw, 0, "run.seed"))
        elif key == "out":
            cfg.out = raw
        else:
            raise UserError(f"run: unknown key {key!r}")
    for section in SECTIONS:
        if section in file_values:
            setattr(cfg, section, _update(getattr(cfg, section), file_values[section], section))

    # flags last
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out:
        cfg.out = args.out
    for section, attrs in FLAG_TARGETS.items():
        values = {dest: getattr(args, dest) for dest in attrs
                  if getattr(args, dest, None) is not None}
        if section == "encoder" and getattr(args, "no_adapters", False):
            values["use_adapters"] = False
        if values:
            setattr(cfg, section, _update(getattr(cfg, section), values, f"--{section} flags"))
    return cfg


def write_config(cfg: RunConfig, path) -> Path:
    parser = configparser.ConfigParser()
    parser["run"] = {"seed": str(cfg.seed), "out": cfg.out, "preset": cfg.preset}
    for section in SECTIONS:
        obj = getattr(cfg, section)
        parser[section] = {f.name: str(getattr(obj, f.name)) for f in dataclasses.fields(obj)
                           if not (section == "train" and f.name == "encoder")
                           and not (section in ("data", "train") and f.name == "seed")}
    path = Path(path)
    with open(path, "w") as fh:
        parser.write(fh)
    return path


def run_dir(cfg: RunConfig, echo: str = "config.ini") -> Path:
    """Create the run directory and echo the resolved config into it.

    Commands that only read a checkpoint echo to their own file so they never
    overwrite the config of the training run sharing the directory.
    """
    if not cfg.out:
        cfg.out = str(Path("runs") / f"{time.strftime('%Y%m%d-%H%M%S')}-seed{cfg.seed}")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out / echo)
    return out


# ---------------------------------------------------------------- data helpers


def _manifest_path(path) -> Path:
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.jsonl"
    if not p.exists():
        raise UserError(f"no dataset manifest at {p}")
    return p


def load_dataset(data_arg, cfg: RunConfig, out: Path):
    """Load ``--data`` if given; otherwise generate from the config into ``out/data``."""
    if data_arg:
        return ds_mod.load_split(_manifest_path(data_arg)), str(_manifest_path(data_arg))
    dataset = ds_mod.generate(cfg.split_spec())
    manifest = ds_mod.save(dataset, out / "data")
    return dataset, str(manifest)


# ---------------------------------------------------------------- commands


def cmd_gen_data(args, cfg: RunConfig) -> int:
    out = run_dir(cfg)
    spec = cfg.split_spec()
    dataset = ds_mod.generate(spec)
    report = ds_mod.verify_split(dataset)
    manifest = ds_mod.save(dataset, out / "data")
    (out / "data" / "spec.json").write_text(json.dumps(ds_mod.spec_dict(spec), indent=1))
    print(json.dumps(report, indent=1))
    print(f"wrote {manifest}")
    return 0 if report["ok"] else 1


def cmd_train(args, cfg: RunConfig) -> int:
    out = run_dir(cfg)
    dataset, manifest = load_dataset(args.data, cfg, out)
    tcfg = cfg.train_config(dataset)
    result = train(tcfg, dataset, log_path=out / "train_log.jsonl", echo=True)
    ckpt = result.checkpoint
    ckpt.config = {"train": tcfg.to_dict(), "data": manifest,
                   "label_space": {"n_states": dataset.n_states, "n_objects": dataset.n_objects}}
    path = save_checkpoint(ckpt, out / CHECKPOINT_NAME)
    print(f"best epoch {result.best_epoch}; checkpoint {path}")
    return 0


def _load_model(path):
    try:
        ckpt = load_checkpoint(path)
    except FileNotFoundError:
        raise UserError(f"checkpoint {path} not found") from None
    model, tcfg = model_from_checkpoint(ckpt)
    return ckpt, model, tcfg


def cmd_eval(args, cfg: RunConfig) -> int:
    out = run_dir(cfg, "config_eval.ini")
    ckpt, model, tcfg = _load_model(args.checkpoint)
    data = args.data or ckpt.config.get("data")
    if not data:
        raise UserError("no --data given and the checkpoint does not record its dataset")
    dataset = ds_mod.load_split(_manifest_path(data))
    e = cfg.eval
    report = evaluate(model, dataset, e.mode, e.phase, beta=e.beta, tau=tcfg.tau,
                      t2i_mode=tcfg.t2i_mode, threshold=e.feasibility_threshold)
    stem = f"metrics_{e.mode}_{e.phase}"
    jpath, cpath = write_report(report, out, stem)
    dump_predictions(report, out / f"predictions_{e.mode}_{e.phase}.tsv")
    summary = {k: report[k] for k in ("mode", "phase", "target_size", "best_seen",
                                      "best_unseen", "auc", "best_hm")}
    print(json.dumps(summary))
    print(f"wrote {jpath} and {cpath}")
    return 0


def cmd_ablate(args, cfg: RunConfig) -> int:
    if args.axis not in ablation.AXES:
        raise UserError(f"unknown ablation axis {args.axis!r}; choose from {sorted(ablation.AXES)}")
    out = run_dir(cfg)
    dataset, _ = load_dataset(args.data, cfg, out)
    only = args.only.split(",") if args.only else None
    try:
        rows = ablation.axis_rows(args.axis, only)
    except KeyError as exc:
        raise UserError(exc.args[0]) from None
    log.info("ablation %s: %d configurations", args.axis, len(rows))
    results = ablation.run_axis(args.axis, cfg.train_config(dataset), dataset, only,
                                on_row=lambda r: print(json.dumps(r), flush=True))
    path = ablation.write_csv(results, out / f"ablation_{args.axis}.csv")
    print(f"wrote {path}")
    return 0


def expert_load(model) -> dict[str, dict[str, np.ndarray]]:
    """Routed-expert shares per text layer for state prompts and object prompts."""
    tracker = LoadTracker()
    model.state_features(tracker=tracker)
    model.object_features(tracker=tracker)
    loads: dict[str, dict[str, np.ndarray]] = {}
    for domain in ("state", "object"):
        tags = sorted(t for t in tracker.counts if t.startswith(f"{domain}."))
        if not tags:
            raise UserError("the text encoder has no routed experts to inspect")
        per = {t.split(".", 1)[1]: tracker.shares(t) for t in tags}
        per["all"] = load_shares(sum(tracker.counts[t] for t in tags))
        loads[domain] = per
    return loads


def cmd_inspect_experts(args, cfg: RunConfig) -> int:
    out = run_dir(cfg, "config_inspect.ini")
    _, model, _ = _load_model(args.checkpoint)
    routed = [a for name, a in model.adapters() if name.startswith("text")
              and a.n_routed and a.top_k]
    if not routed:
        raise UserError("no routed experts are active (K=0 or shared-only adapters)")
    loads = expert_load(model)
    n = routed[0].n_routed
    path = out / "expert_load.csv"
    with open(path, "w") as fh:
        for domain, per in loads.items():
            fh.write(f"# domain={domain}\n")
            fh.write("layer," + ",".join(f"expert_{i}" for i in range(1, n + 1)) + "\n")
            for layer, shares in per.items():
                fh.write(layer + "," + ",".join(repr(float(v)) for v in shares) + "\n")
            fh.write("\n")
    summary = {
        "domains": {d: {k: v.tolist() for k, v in per.items()} for d, per in loads.items()},
        "l1_state_object": float(np.abs(loads["state"]["all"] - loads["object"]["all"]).sum()),
    }
    (out / "expert_load.json").write_text(json.dumps(summary, indent=1))
    print(json.dumps({"l1_state_object": summary["l1_state_object"],
                      "state": summary["domains"]["state"]["all"],
                      "object": summary["domains"]["object"]["all"]}))
    print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------- parser

# flag destination names per config section
FLAG_TARGETS = {
    "data": ("n_states", "n_objects", "n_train_pairs", "images_per_pair", "noise"),
    "encoder": ("rank", "top_k", "n_routed", "n_shared"),
    "train": ("epochs", "lambda1", "lambda2", "alpha", "lr", "batch_size", "t2i_mode"),
    "eval": ("mode", "phase", "beta", "feasibility_threshold"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file (flags override its values)")
    common.add_argument("--seed", type=int, help="seed for data generation and training")
    common.add_argument("--out", help="run directory (default runs/<timestamp>-seed<seed>)")
    common.add_argument("--preset", choices=sorted(PRESETS),
                        help="reference: full-scale defaults (lr 1e-4); micro: lr 1e-3 for the synthetic benchmark")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="eva", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset")
    g.add_argument("--n-states", type=int)
    g.add_argument("--n-objects", type=int)
    g.add_argument("--n-train-pairs", type=int)
    g.add_argument("--images-per-pair", type=int)
    g.add_argument("--noise", type=float)

    def model_flags(sp):
        sp.add_argument("--data", help="dataset directory or manifest.jsonl")
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--lambda1", type=float)
        sp.add_argument("--lambda2", type=float)
        sp.add_argument("--alpha", type=float)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--t2i-mode", choices=("renormalized", "literal"))
        sp.add_argument("--rank", type=int)
        sp.add_argument("--top-k", type=int)
        sp.add_argument("--n-routed", type=int)
        sp.add_argument("--n-shared", type=int)
        sp.add_argument("--no-adapters", action="store_true")

    t = sub.add_parser("train", parents=[common], help="train and save the best checkpoint")
    model_flags(t)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data")
    e.add_argument("--mode", choices=("closed", "open"))
    e.add_argument("--phase", choices=("val", "test"))
    e.add_argument("--beta", type=float)
    e.add_argument("--feasibility-threshold", type=float)

    a = sub.add_parser("ablate", parents=[common], help="run an ablation grid")
    a.add_argument("--axis", required=True, help=f"one of {', '.join(ablation.AXES)}")
    a.add_argument("--only", help="comma-separated subset of the axis settings")
    model_flags(a)

    i = sub.add_parser("inspect-experts", parents=[common],
                       help="per-expert token load for state and object prompts")
    i.add_argument("--checkpoint", required=True)
    return p


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "inspect-experts": cmd_inspect_experts,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        return COMMANDS[args.command](args, cfg)
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except (UserError, SplitError, CheckpointError, ValueError, KeyError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
