"""Command-line runner: phantom generation, style bank, federated training, reports.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import subprocess
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

from . import __version__
from .errors import ConfigError, FormatError, NotFoundError
from .federation import (
    Augmentation,
    FederationConfig,
    RoundReport,
    format_bytes,
    prepare_client,
    prepare_volume,
    run_federation,
    traffic_report,
    write_reports_csv,
)
from .phantom import (
    AnalyticSliceScoreProvider,
    LabeledVolume,
    PhantomSpec,
    generate_client_splits,
    make_out_of_federation_client,
)
from .segmodel import init_model, load_model, model_size_bytes, save_model
from .stylebank import StyleBank, bank_size_bytes, load_bank, register_client_styles, save_bank
from .volume import load_labels, load_volume, save_labels, save_volume

log = logging.getLogger("a3dfdg")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
THREADS_ENV = "A3DFDG_THREADS"
MANIFEST = "manifest.txt"
RUN_MANIFEST = "run_manifest.json"
ROUNDS_CSV = "rounds.csv"
CHECKPOINTS = "checkpoints"


class UsageError(Exception):
    pass


# -- config file -------------------------------------------------------------

def _floats(n: int) -> Callable[[str], tuple]:
    def parse(text: str) -> tuple:
        parts = [p for p in text.replace(",", " ").split() if p]
        if len(parts) != n:
            raise ValueError(f"expected {n} comma-separated numbers")
        return tuple(float(p) for p in parts)
    return parse


def _ints(n: int) -> Callable[[str], tuple]:
    def parse(text: str) -> tuple:
        return tuple(int(round(v)) for v in _floats(n)(text))
    return parse


def _opt_float(text: str) -> Optional[float]:
    return None if text.strip().lower() in ("", "none", "default") else float(text)


_PHANTOM_KEYS = {
    "volumes_per_client": int,
    "oof_volumes": int,
    "shape": _ints(3),
    "spacing": _floats(3),
    "val_fraction": float,
    "test_fraction": float,
}
_FEDERATION_KEYS = {
    "rounds": int,
    "local_iters": int,
    "lr": _opt_float,
    "batch_size": int,
    "alpha_range": _floats(2),
    "beta": _floats(3),
    "z_bin": float,
    "tau_air": float,
    "augmentation": Augmentation,
    "crop_size": _ints(3),
    "target_spacing": _floats(3),
    "crops_per_volume": int,
    "eval_every": int,
    "threads": int,
}
_SHARED_KEYS = {"seed": int}
_PATH_KEYS = {"data_dir": str, "bank": str, "out": str}
CONFIG_KEYS = {**_PHANTOM_KEYS, **_FEDERATION_KEYS, **_SHARED_KEYS, **_PATH_KEYS}


def parse_config(text: str, origin: str = "<config>") -> Dict[str, object]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out: Dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{origin}:{lineno}: unknown config key {key!r}")
        try:
            out[key] = CONFIG_KEYS[key](value)
        except ValueError as exc:
            raise ConfigError(f"{origin}:{lineno}: bad value for {key!r}: {exc}") from None
    return out


def load_config(path: Optional[str]) -> Dict[str, object]:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    return parse_config(p.read_text(encoding="utf-8"), str(p))


def phantom_spec(cfg: Dict[str, object]) -> PhantomSpec:
    kw = {k: cfg[k] for k in _PHANTOM_KEYS if k in cfg}
    if "crop_size" in cfg:
        kw["crop_size"] = cfg["crop_size"]
    try:
        return PhantomSpec(seed=int(cfg.get("seed", 0)), **kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def federation_config(cfg: Dict[str, object]) -> FederationConfig:
    kw = {k: cfg[k] for k in _FEDERATION_KEYS if k in cfg}
    return FederationConfig(seed=int(cfg.get("seed", 0)), **kw)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, Augmentation):
        return obj.value
    return obj


def build_id() -> str:
    """Package version plus the git commit of the source tree, when available."""
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=5,
        )
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_run_manifest(out_dir: Path, command: str, config: dict, seed: int, artifacts: dict) -> Path:
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "seed": seed,
        "build": build_id(),
        "config": _jsonable(config),
        "artifacts": _jsonable(artifacts),
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    path = out_dir / RUN_MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _prepare_out_dir(path: Path, force: bool) -> None:
    if path.exists() and not path.is_dir():
        raise UsageError(f"output path exists and is not a directory: {path}")
    if path.is_dir() and any(path.iterdir()):
        if not force:
            raise UsageError(f"output directory {path} is not empty (use --force to overwrite)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)


# -- data manifest -----------------------------------------------------------

def _write_item(root: Path, rel: str, item: LabeledVolume) -> None:
    path = root / rel
    path.parent.mkdir(parents=True, exist_ok=True)
    save_volume(path, item.volume)
    save_labels(label_path(path), item.volume, item.labels)


def label_path(volume_path: Path) -> Path:
    return volume_path.with_suffix(".a3dl")


def read_manifest(data_dir: Path) -> List[dict]:
    path = data_dir / MANIFEST
    if not path.is_file():
        raise UsageError(f"data manifest not found: {path}")
    rows = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise FormatError(f"{path}:{lineno}: expected 5 tab-separated fields")
        rel, client, split, z_min, z_max = parts
        rows.append({"path": rel, "client": int(client), "split": split, "z_window": (float(z_min), float(z_max))})
    return rows


def load_item(data_dir: Path, row: dict) -> LabeledVolume:
    """Load a volume and its labels, re-attaching provenance from the manifest."""
    path = data_dir / row["path"]
    v = load_volume(path)
    labels = load_labels(label_path(path))
    meta = {"uid": row["path"], "client": row["client"], "split": row["split"], "z_window": row["z_window"]}
    return LabeledVolume(replace(v, meta=meta), labels)


def load_federation(data_dir: Path, splits: Sequence[str]) -> Dict[int, Dict[str, List[LabeledVolume]]]:
    out: Dict[int, Dict[str, List[LabeledVolume]]] = {}
    for row in read_manifest(data_dir):
        if row["split"] in splits:
            out.setdefault(row["client"], {}).setdefault(row["split"], []).append(load_item(data_dir, row))
    return out


# -- commands ----------------------------------------------------------------

def cmd_gen_data(args, cfg: dict) -> int:
    spec = phantom_spec(cfg)
    out = Path(args.out or cfg.get("data_dir") or "data")
    _prepare_out_dir(out, args.force)
    lines = ["# path\tclient\tsplit\tz_min\tz_max"]
    for cid in range(len(spec.domains)):
        splits = generate_client_splits(spec, cid)
        for split in ("train", "val", "test"):
            for item in splits[split]:
                rel = item.volume.meta["uid"] + ".a3dv"
                _write_item(out, rel, item)
                z0, z1 = item.volume.z_extent
                lines.append(f"{rel}\t{cid}\t{split}\t{z0!r}\t{z1!r}")
    oof_id = len(spec.domains)
    for item in make_out_of_federation_client(spec):
        rel = item.volume.meta["uid"] + ".a3dv"
        _write_item(out, rel, item)
        z0, z1 = item.volume.z_extent
        lines.append(f"{rel}\t{oof_id}\toof\t{z0!r}\t{z1!r}")
    (out / MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")
    write_run_manifest(out, "gen-data", cfg, spec.seed, {"manifest": MANIFEST, "volumes": len(lines) - 1})
    print(f"wrote {len(lines) - 1} volumes for {len(spec.domains)} clients + out-of-federation to {out}")
    return EXIT_OK


def cmd_build_bank(args, cfg: dict) -> int:
    fed = federation_config(cfg)
    data_dir = Path(args.data or cfg.get("data_dir") or "data")
    out = Path(args.out or cfg.get("bank") or "bank.a3db")
    if out.exists() and not args.force:
        raise UsageError(f"bank file {out} exists (use --force to overwrite)")
    clients = load_federation(data_dir, ("train",))
    oof_ids = {r["client"] for r in read_manifest(data_dir) if r["split"] == "oof"}
    bank = StyleBank(z_bin=fed.z_bin, beta=fed.beta, crop_size=fed.crop_size)
    provider = AnalyticSliceScoreProvider()
    log_lines = []
    for cid in sorted(c for c in clients if c not in oof_ids):
        vols = [item.volume for item in clients[cid]["train"]]
        before = len(bank)
        bank = register_client_styles(
            bank, cid, vols, fed.crops_per_volume, provider, rng_seed=fed.seed,
            target_spacing=fed.target_spacing,
        )
        log_lines.append(f"client {cid}: {len(bank) - before} styles from {len(vols)} train volumes")
        log_lines += [f"  {v.meta['uid']}" for v in vols]
    log_lines += [f"skipped: {msg}" for msg in bank.skipped]
    out.parent.mkdir(parents=True, exist_ok=True)
    n_bytes = save_bank(out, bank)
    log_path = out.with_suffix(out.suffix + ".log")
    log_path.write_text("\n".join(log_lines) + "\n", encoding="utf-8")
    print(f"bank {out}: {len(bank)} styles, {n_bytes} bytes ({format_bytes(n_bytes)})")
    return EXIT_OK


def _load_clients(data_dir: Path, fed: FederationConfig):
    provider = AnalyticSliceScoreProvider()
    rows = read_manifest(data_dir)
    oof_ids = {r["client"] for r in rows if r["split"] == "oof"}
    data = load_federation(data_dir, ("train", "test", "oof"))
    clients = []
    for cid in sorted(c for c in data if c not in oof_ids):
        splits = data[cid]
        clients.append(prepare_client(cid, splits.get("train", []), splits.get("test", []), provider, fed.target_spacing))
    oof = [
        prepare_volume(item, provider, fed.target_spacing)
        for cid in sorted(oof_ids) for item in data.get(cid, {}).get("oof", [])
    ]
    return clients, oof


def _latest_checkpoint(run_dir: Path) -> Optional[Path]:
    ckpts = sorted((run_dir / CHECKPOINTS).glob("round_*.a3dm"))
    return ckpts[-1] if ckpts else None


def _truncate_csv(path: Path, keep_through: int) -> None:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    kept = rows[:1] + [r for r in rows[1:] if r and int(r[0]) <= keep_through]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh).writerows(kept)


def cmd_train(args, cfg: dict) -> int:
    fed = federation_config(cfg)
    data_dir = Path(args.data or cfg.get("data_dir") or "data")
    out = Path(args.out or cfg.get("out") or "run")
    bank_path = args.bank or cfg.get("bank")
    bank = None
    if fed.augmentation is not Augmentation.NONE:
        if bank_path is None:
            raise UsageError(f"arm {fed.augmentation.value} needs --bank")
        if not Path(bank_path).is_file():
            raise UsageError(f"bank file not found: {bank_path}")
        bank = load_bank(bank_path)

    clients, oof = _load_clients(data_dir, fed)
    n_classes = 1 + max(int(item.labels.max()) for c in clients for item in c.train + c.test)
    n_classes = max(n_classes, PhantomSpec().n_classes)
    start_round = 0
    model = init_model(n_classes, fed.seed)
    if args.resume:
        ckpt = _latest_checkpoint(out)
        if ckpt is None or not (out / ROUNDS_CSV).is_file():
            raise UsageError(f"nothing to resume in {out}")
        model = load_model(ckpt)
        start_round = int(ckpt.stem.split("_")[1])
        _truncate_csv(out / ROUNDS_CSV, start_round)
    else:
        _prepare_out_dir(out, args.force)
    (out / CHECKPOINTS).mkdir(exist_ok=True)

    client_ids = [c.client_id for c in clients]
    class_ids = list(range(1, n_classes))

    def on_round(report: RoundReport, m) -> None:
        save_model(out / CHECKPOINTS / f"round_{report.round:04d}.a3dm", m)
        append = report.round > 1
        write_reports_csv(out / ROUNDS_CSV, [report], client_ids, class_ids, append=append)

    model_bytes = model_size_bytes(model)
    bank_bytes = bank_size_bytes(bank) if bank is not None else 0
    artifacts = {
        "rounds_csv": ROUNDS_CSV,
        "checkpoints": CHECKPOINTS,
        "data_dir": str(data_dir),
        "bank": str(bank_path) if bank is not None else None,
        "class_names": PhantomSpec().class_names,
        "model_bytes": model_bytes,
        "bank_bytes": bank_bytes,
    }
    write_run_manifest(out, "train", asdict(fed), fed.seed, artifacts)
    if start_round >= fed.rounds:
        print(f"run {out} already complete at round {start_round}")
        return EXIT_OK
    model, reports = run_federation(fed, clients, bank, model, oof, start_round=start_round, on_round=on_round)
    ledger = traffic_report(fed, model_bytes, bank_bytes if fed.augmentation is not Augmentation.NONE else 0)
    final = reports[-1]
    print(
        f"{fed.augmentation.value} R={fed.rounds}: in-fed Global DSC {final.in_fed.global_dsc:.2f}"
        + (f", out-of-fed {final.out_fed.global_dsc:.2f}" if final.out_fed else "")
        + f", traffic {format_bytes(ledger.total_bytes)}"
    )
    return EXIT_OK


def _final_row(path: Path) -> dict:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.DictReader(fh) if r.get("in_global_dsc")]
    if not rows:
        raise FormatError(f"{path} has no evaluated rounds")
    return rows[-1]


def _num(text: str) -> Optional[float]:
    return float(text) if text not in ("", None) else None


def cmd_report(args, cfg: dict) -> int:
    runs = []
    for run in args.runs:
        path = Path(run) / ROUNDS_CSV if Path(run).is_dir() else Path(run)
        if not path.is_file():
            raise UsageError(f"round CSV not found: {path}")
        runs.append((str(run), _final_row(path)))
    names = PhantomSpec().class_names
    class_ids = sorted(int(k.split("_")[-1]) for k in runs[0][1] if k.startswith("in_dsc_"))
    metrics = []
    for prefix, label in (("in_", "in-fed"), ("oof_", "out-of-fed")):
        for kind, unit in (("dsc", "DSC%"), ("asd", "ASD mm")):
            for c in class_ids:
                metrics.append((f"{label} {unit} {names.get(c, c)}", f"{prefix}{kind}_{c}"))
            metrics.append((f"{label} {unit} Global", f"{prefix}global_{kind}"))
    metrics.append(("cumulative bytes", "cumulative_bytes"))

    header = ["metric"] + [name for name, _ in runs]
    if len(runs) > 1:
        header += [f"delta {name}" for name, _ in runs[1:]]
    table = []
    for label, key in metrics:
        vals = [_num(row.get(key, "")) for _, row in runs]
        line = [label] + ["" if v is None else f"{v:.2f}" for v in vals]
        for v in vals[1:]:
            line.append("" if v is None or vals[0] is None else f"{v - vals[0]:+.2f}")
        table.append(line)

    widths = [max(len(r[i]) for r in [header] + table) for i in range(len(header))]
    for r in [header] + table:
        print("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip())
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            csv.writer(fh).writerows([header] + table)
    return EXIT_OK


# -- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="a3dfdg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help):
        p.add_argument("--config", help="flat 'key = value' config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help=out_help)
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")

    p = sub.add_parser("gen-data", help="generate the phantom federation")
    common(p, "output data directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("build-bank", help="register training-split styles into a bank file")
    common(p, "bank file path")
    p.add_argument("--data", help="data directory written by gen-data")
    p.set_defaults(func=cmd_build_bank)

    p = sub.add_parser("train", help="run federated training")
    common(p, "run directory")
    p.add_argument("--data", help="data directory written by gen-data")
    p.add_argument("--bank", help="style bank file")
    p.add_argument("--rounds", type=int)
    p.add_argument("--arm", choices=[a.value for a in Augmentation])
    p.add_argument("--threads", type=int, help=f"client worker threads (fallback: ${THREADS_ENV})")
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in --out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("report", help="compare final metrics of finished runs")
    p.add_argument("runs", nargs="+", help="run directories or rounds.csv files")
    p.add_argument("--out", help="also write the table as CSV")
    p.set_defaults(func=cmd_report)
    return parser


def _merge_overrides(args, cfg: dict) -> dict:
    cfg = dict(cfg)
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if getattr(args, "rounds", None) is not None:
        cfg["rounds"] = args.rounds
    if getattr(args, "arm", None) is not None:
        cfg["augmentation"] = Augmentation(args.arm)
    threads = getattr(args, "threads", None)
    if threads is None and os.environ.get(THREADS_ENV):
        try:
            threads = int(os.environ[THREADS_ENV])
        except ValueError:
            raise ConfigError(f"${THREADS_ENV} must be an integer, got {os.environ[THREADS_ENV]!r}") from None
    if threads is not None:
        cfg["threads"] = threads
    return cfg


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _merge_overrides(args, load_config(getattr(args, "config", None)))
        return args.func(args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, NotFoundError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
