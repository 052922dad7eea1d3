"""Command-line pipeline: gen-data, train, estimate, evaluate, ablate-m.

Every subcommand accepts ``--config FILE`` holding plain ``key=value``
lines (same keys as the long flags, underscores for dashes); explicit
flags override the file, and the fully resolved configuration is written
next to the outputs.  A run owns its output directory: it must be new or
empty, and partial outputs are removed if the run fails.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import shutil
import sys
from pathlib import Path

import numpy as np

from .data import (
    CorruptionConfig,
    Dataset,
    classes_to_mask,
    corrupt_mask,
    generate_dataset,
    load_dataset,
    mask_to_classes,
    save_dataset,
)
from .errors import ConfigError, CrispError, InputError
from .metrics import EvalConfig, evaluate, save_records_csv, save_report_json
from .model import ModelConfig, load_model, save_model, segment
from .training import TrainConfig, diag_accuracy, train
from .uncertainty import (
    LatentBank,
    build_bank,
    crisp_uncertainty,
    default_m,
    edge_uncertainty,
    entropy_uncertainty,
    load_pgm,
    load_uncertainty,
    save_pgm,
    save_uncertainty,
    write_pgm,
)

_REQUIRED = object()

# key -> (type, default) per subcommand; _REQUIRED means the flag or the
# config file must supply it
_KEYS = {
    "gen-data": {
        "out": (str, _REQUIRED),
        "count": (int, 200),
        "size": (int, 32),
        "classes": (int, 3),
        "seed": (int, 0),
        "noise_sigma": (float, 0.05),
    },
    "train": {
        "data": (str, _REQUIRED),
        "out": (str, _REQUIRED),
        "d_x": (int, 32),
        "d_y": (int, 32),
        "d_h": (int, 16),
        "hidden": (int, 128),
        "init_seed": (int, 0),
        "batch_size": (int, 32),
        "learning_rate": (float, 0.001),
        "weight_decay": (float, 1e-4),
        "adam_beta1": (float, 0.9),
        "adam_beta2": (float, 0.999),
        "adam_eps": (float, 1e-8),
        "max_epochs": (int, 200),
        "patience": (int, 10),
        "val_fraction": (float, 0.2),
        "seed": (int, 0),
        "dice_weight": (float, 1.0),
        "ce_weight": (float, 1.0),
    },
    "estimate": {
        "data": (str, _REQUIRED),
        "out": (str, _REQUIRED),
        "method": (str, "crisp"),
        "checkpoint": (str, ""),
        "bank_data": (str, ""),
        "m": (int, 0),
        "m_ratio": (float, 0.0),
        "normalize": (str, "count"),
        "pred_source": (str, "corrupt"),
        "severity": (str, "0,1,2,3,4"),
        "seed": (int, 0),
        "preds": (str, ""),
        "cache_dir": (str, ""),
    },
    "evaluate": {
        "data": (str, _REQUIRED),
        "preds": (str, _REQUIRED),
        "out": (str, _REQUIRED),
        "maps": (str, ""),
        "ece_bins": (int, 10),
        "mi_bins": (int, 32),
    },
    "ablate-m": {
        "data": (str, _REQUIRED),
        "out": (str, _REQUIRED),
        "checkpoint": (str, _REQUIRED),
        "bank_data": (str, _REQUIRED),
        "m_list": (str, "5,10,25"),
        "normalize": (str, "count"),
        "pred_source": (str, "corrupt"),
        "severity": (str, "0,1,2,3,4"),
        "seed": (int, 0),
        "cache_dir": (str, ""),
        "ece_bins": (int, 10),
        "mi_bins": (int, 32),
    },
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crisp",
        description="synthetic-shape contrastive embedding and "
                    "retrieval-based uncertainty maps",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "gen-data": "generate train/val/test synthetic datasets",
        "train": "fit the joint embedding model",
        "estimate": "write prediction and uncertainty maps for a test set",
        "evaluate": "score predictions and uncertainty maps",
        "ablate-m": "sweep the retrieval count M",
    }
    for command, keys in _KEYS.items():
        p = sub.add_parser(command, help=helps[command])
        p.add_argument("--config", default=None,
                       help="key=value file; flags override it")
        for key, (ktype, _) in keys.items():
            flag = "--" + key.replace("_", "-")
            p.add_argument(flag, dest=key, type=ktype, default=None)
    return parser


def _parse_config_file(path: str, keys: dict) -> dict:
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, _, raw = line.partition("=")
        key = key.strip()
        if key not in keys:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        ktype, _ = keys[key]
        try:
            values[key] = ktype(raw.strip())
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}")
    return values


def _resolve(args: argparse.Namespace) -> dict:
    keys = _KEYS[args.command]
    resolved = {k: d for k, (_, d) in keys.items()}
    if args.config:
        resolved.update(_parse_config_file(args.config, keys))
    for key in keys:
        value = getattr(args, key)
        if value is not None:
            resolved[key] = value
    missing = [k for k, v in resolved.items() if v is _REQUIRED]
    if missing:
        raise ConfigError(f"missing required settings: {', '.join(missing)}")
    return resolved


def _own_output_dir(path: str) -> tuple[Path, bool]:
    """Claim an output directory; it must be new or empty."""
    p = Path(path)
    if p.exists():
        if not p.is_dir():
            raise InputError(f"{p} exists and is not a directory")
        if any(p.iterdir()):
            raise InputError(f"output directory {p} is not empty")
        return p, False
    p.mkdir(parents=True)
    return p, True


def _discard_outputs(p: Path, created: bool) -> None:
    if created:
        shutil.rmtree(p, ignore_errors=True)
    else:
        for child in p.iterdir():
            if child.is_dir():
                shutil.rmtree(child, ignore_errors=True)
            else:
                child.unlink(missing_ok=True)


def _write_resolved(out: Path, command: str, resolved: dict) -> None:
    lines = [f"command={command}"]
    lines += [f"{k}={resolved[k]}" for k in sorted(resolved)]
    (out / "resolved_config.txt").write_text("\n".join(lines) + "\n")


def _parse_int_list(text: str, what: str) -> list[int]:
    try:
        values = [int(tok) for tok in text.split(",") if tok.strip() != ""]
    except ValueError as exc:
        raise ConfigError(f"bad {what} list {text!r}: {exc}")
    if not values:
        raise ConfigError(f"empty {what} list")
    return values


def _load_many(paths_csv: str) -> tuple[list, Dataset]:
    """Load one or more comma-separated dataset files; samples concatenated."""
    paths = [p for p in paths_csv.split(",") if p.strip()]
    if not paths:
        raise ConfigError("no dataset paths given")
    datasets = [load_dataset(p) for p in paths]
    first = datasets[0]
    for d, p in zip(datasets[1:], paths[1:]):
        if (d.height, d.width, d.num_classes) != (
            first.height, first.width, first.num_classes
        ):
            raise InputError(f"{p}: geometry differs from {paths[0]}")
    samples = [s for d in datasets for s in d.samples]
    return samples, first


# --- subcommands --------------------------------------------------------

def cmd_gen_data(resolved: dict, out: Path) -> None:
    if resolved["classes"] not in (2, 3):
        raise ConfigError("classes must be 2 or 3")
    if resolved["size"] < 16:
        raise ConfigError("size must be at least 16")
    if resolved["count"] < 4:
        raise ConfigError("count must be at least 4")
    count, size, k = resolved["count"], resolved["size"], resolved["classes"]
    seed, sigma = resolved["seed"], resolved["noise_sigma"]
    splits = {
        "train": (count, seed),
        "val": (max(1, count // 4), seed + 1),
        "test": (max(1, count // 2), seed + 2),
    }
    manifest = {"size": size, "classes": k, "noise_sigma": sigma,
                "splits": {}}
    for name, (n, s) in splits.items():
        dataset = generate_dataset(n, size, size, k, s, noise_sigma=sigma)
        filename = f"{name}.crspds"
        save_dataset(dataset, out / filename)
        manifest["splits"][name] = {"file": filename, "count": n, "seed": s}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def cmd_train(resolved: dict, out: Path) -> None:
    dataset = load_dataset(resolved["data"])
    model_config = ModelConfig(
        height=dataset.height,
        width=dataset.width,
        num_classes=dataset.num_classes,
        d_x=resolved["d_x"],
        d_y=resolved["d_y"],
        d_h=resolved["d_h"],
        hidden=resolved["hidden"],
        init_seed=resolved["init_seed"],
    )
    train_config = TrainConfig(
        batch_size=resolved["batch_size"],
        learning_rate=resolved["learning_rate"],
        weight_decay=resolved["weight_decay"],
        adam_beta1=resolved["adam_beta1"],
        adam_beta2=resolved["adam_beta2"],
        adam_eps=resolved["adam_eps"],
        max_epochs=resolved["max_epochs"],
        patience=resolved["patience"],
        val_fraction=resolved["val_fraction"],
        seed=resolved["seed"],
        dice_weight=resolved["dice_weight"],
        ce_weight=resolved["ce_weight"],
    )
    model, history = train(dataset, model_config, train_config)
    save_model(model, out / "model.crspmd")
    history.save_csv(out / "history.csv")
    acc = diag_accuracy(model, dataset.samples)
    print(f"selected epoch {history.selected_epoch}, "
          f"train diag_accuracy {acc:.4f}")


def _bank_cache_key(checkpoint: str, bank_paths: str) -> str:
    digest = hashlib.sha256()
    digest.update(Path(checkpoint).read_bytes())
    for p in bank_paths.split(","):
        if p.strip():
            digest.update(Path(p).read_bytes())
    return digest.hexdigest()[:16]


def _bank_for(resolved: dict) -> tuple[LatentBank, object]:
    model = load_model(resolved["checkpoint"])
    cache_dir = resolved.get("cache_dir", "")
    cache = None
    if cache_dir:
        key = _bank_cache_key(resolved["checkpoint"], resolved["bank_data"])
        cache = Path(cache_dir) / f"bank_{key}.npz"
        if cache.exists():
            with np.load(cache) as archive:
                bank = LatentBank(z_bar=archive["z_bar"],
                                  h_bar=archive["h_bar"])
            return bank, model
    bank_samples, _ = _load_many(resolved["bank_data"])
    bank = build_bank([s.mask for s in bank_samples], model)
    if cache is not None:
        cache.parent.mkdir(parents=True, exist_ok=True)
        np.savez(cache, z_bar=bank.z_bar, h_bar=bank.h_bar)
    return bank, model


def _choose_m(resolved: dict, n: int) -> int:
    if resolved["m"]:
        return resolved["m"]
    if resolved["m_ratio"]:
        return min(n, max(1, round(resolved["m_ratio"] * n)))
    return default_m(n)


def _make_predictions(
    resolved: dict, samples: list, model
) -> tuple[list, list]:
    """Return (one-hot predictions, probability maps) for the test set."""
    source = resolved["pred_source"]
    if source == "external":
        pred_dir = Path(resolved["preds"])
        files = sorted(pred_dir.glob("pred_*.pgm"))
        if len(files) != len(samples):
            raise InputError(
                f"{pred_dir}: found {len(files)} predictions for "
                f"{len(samples)} samples"
            )
        k = samples[0].mask.shape[0]
        preds = [classes_to_mask(load_pgm(f), k) for f in files]
        return preds, [p.astype(np.float64) for p in preds]
    if source == "model":
        if model is None:
            raise ConfigError("pred_source=model requires --checkpoint")
        preds, probs = [], []
        for s in samples:
            p = segment(model, s.image)
            probs.append(p)
            preds.append(classes_to_mask(p.argmax(axis=0),
                                         s.mask.shape[0]))
        return preds, probs
    if source == "corrupt":
        severities = _parse_int_list(resolved["severity"], "severity")
        rng = np.random.default_rng(resolved["seed"])
        preds = []
        for s in samples:
            sev = severities[int(rng.integers(len(severities)))]
            sub_seed = int(rng.integers(2**32))
            preds.append(corrupt_mask(
                s.mask, CorruptionConfig(severity=sev, seed=sub_seed)
            ))
        return preds, [p.astype(np.float64) for p in preds]
    raise ConfigError(f"unknown pred_source {source!r}")


def _estimate_maps(
    resolved: dict, samples: list, preds: list, probs: list,
    model, bank: LatentBank | None,
) -> list:
    method = resolved["method"]
    if method == "crisp":
        m = _choose_m(resolved, bank.n)
        return [
            crisp_uncertainty(s.image, pred, model, bank, m,
                              normalize=resolved["normalize"])
            for s, pred in zip(samples, preds)
        ]
    if method == "edge":
        return [edge_uncertainty(pred) for pred in preds]
    if method == "entropy":
        return [entropy_uncertainty(p) for p in probs]
    raise ConfigError(f"unknown method {method!r}")


def cmd_estimate(resolved: dict, out: Path) -> None:
    method = resolved["method"]
    if method not in ("crisp", "edge", "entropy"):
        raise ConfigError(f"unknown method {method!r}")
    samples, _ = _load_many(resolved["data"])

    model = None
    bank = None
    if method == "crisp":
        if not resolved["checkpoint"] or not resolved["bank_data"]:
            raise ConfigError(
                "method=crisp requires --checkpoint and --bank-data"
            )
        bank, model = _bank_for(resolved)
    elif resolved["pred_source"] == "model" or resolved["checkpoint"]:
        if not resolved["checkpoint"]:
            raise ConfigError("pred_source=model requires --checkpoint")
        model = load_model(resolved["checkpoint"])
    if resolved["pred_source"] == "external" and not resolved["preds"]:
        raise ConfigError("pred_source=external requires --preds")

    preds, probs = _make_predictions(resolved, samples, model)
    maps = _estimate_maps(resolved, samples, preds, probs, model, bank)

    for i, (pred, u) in enumerate(zip(preds, maps)):
        write_pgm(out / f"pred_{i:04d}.pgm",
                  mask_to_classes(pred).astype(np.uint8))
        save_pgm(out / f"unc_{i:04d}.pgm", u)
        save_uncertainty(out / f"unc_{i:04d}.um", u)


def _load_run_outputs(preds_dir: str, maps_dir: str, n: int, k: int):
    pred_files = sorted(Path(preds_dir).glob("pred_*.pgm"))
    map_files = sorted(Path(maps_dir).glob("unc_*.um"))
    if len(pred_files) != n or len(map_files) != n:
        raise InputError(
            f"expected {n} predictions and maps, found "
            f"{len(pred_files)} and {len(map_files)}"
        )
    preds = [classes_to_mask(load_pgm(f), k) for f in pred_files]
    maps = [load_uncertainty(f) for f in map_files]
    return preds, maps


def cmd_evaluate(resolved: dict, out: Path) -> None:
    samples, dataset = _load_many(resolved["data"])
    maps_dir = resolved["maps"] or resolved["preds"]
    preds, maps = _load_run_outputs(
        resolved["preds"], maps_dir, len(samples), dataset.num_classes
    )
    config = EvalConfig(ece_bins=resolved["ece_bins"],
                        mi_bins=resolved["mi_bins"])
    report = evaluate(samples, preds, maps, config)
    save_report_json(report, out / "report.json")
    save_records_csv(report, out / "per_sample.csv")

    with (out / "confidence_hist.csv").open("w") as fh:
        fh.write("confidence,correct\n")
        for sample, pred, u in zip(samples, preds, maps):
            err = np.asarray(pred).argmax(axis=0) != sample.mask.argmax(axis=0)
            for c, ok in zip(1.0 - u.ravel(), (~err).ravel()):
                fh.write(f"{c:.10g},{int(ok)}\n")
    corr = "degenerate" if report.correlation_degenerate else (
        f"{report.correlation:.4f}"
    )
    print(f"correlation {corr}, ece {report.ece:.4f}, "
          f"weighted_mi {report.weighted_mi:.4f}")


def cmd_ablate_m(resolved: dict, out: Path) -> None:
    samples, _ = _load_many(resolved["data"])
    bank, model = _bank_for(resolved)
    m_values = _parse_int_list(resolved["m_list"], "m")
    preds, probs = _make_predictions(resolved, samples, model)
    config = EvalConfig(ece_bins=resolved["ece_bins"],
                        mi_bins=resolved["mi_bins"])

    rows = []
    for m in m_values:
        maps = [
            crisp_uncertainty(s.image, pred, model, bank, m,
                              normalize=resolved["normalize"])
            for s, pred in zip(samples, preds)
        ]
        report = evaluate(samples, preds, maps, config)
        corr = ("" if report.correlation_degenerate
                else f"{report.correlation:.10g}")
        rows.append(f"{m},{corr},{report.weighted_mi:.10g}")
    (out / "ablation.csv").write_text(
        "m,correlation,weighted_mi\n" + "\n".join(rows) + "\n"
    )


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "estimate": cmd_estimate,
    "evaluate": cmd_evaluate,
    "ablate-m": cmd_ablate_m,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        resolved = _resolve(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    try:
        out, created = _own_output_dir(resolved["out"])
    except (CrispError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    try:
        _write_resolved(out, args.command, resolved)
        _COMMANDS[args.command](resolved, out)
    except ConfigError as exc:
        _discard_outputs(out, created)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (CrispError, OSError) as exc:
        _discard_outputs(out, created)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except BaseException:
        _discard_outputs(out, created)
        raise
    return 0
