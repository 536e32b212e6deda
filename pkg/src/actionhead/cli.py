"""Command-line entry point and experiment orchestration.

Exit codes: 0 success, 2 usage error, 3 input-format error, 4 runtime error.
The working directory for artifacts defaults to the current directory and can
be overridden with the ACTIONHEAD_WORKDIR environment variable or --workdir.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import struct
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import checkpoint as ckmod
from . import dataset as dsmod
from .backbones import BACKBONE_KINDS, BackboneConfig
from .bench import BenchError, comparison_rows, run_bench
from .checkpoint import FormatError, file_sha256, load_checkpoint
from .dataset import load_dataset, save_dataset
from .diffusion import DiffusionError
from .envs import (
    EnvError,
    EvalReport,
    TASK_NAMES,
    collect_demos,
    evaluate,
    make_task,
)
from .grad import GradError
from .kinematics import KinematicsError, load_chain
from .report import ReportError, write_report
from .trajgen import TrajGenError, build_dataset, family_presets
from .training import (
    TrainConfig,
    TrainError,
    train_normal,
    train_stage1,
    train_stage2,
)

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_FORMAT = 3
EXIT_RUNTIME = 4

WORKDIR_ENV = "ACTIONHEAD_WORKDIR"
LOCK_NAME = ".actionhead.lock"

_FAMILY_ALIASES = {"reach": "reach-left", "pick": "pick-center", "push": "push-right"}


class UsageError(ValueError):
    pass


def _workdir(args) -> Path:
    if getattr(args, "workdir", None):
        root = Path(args.workdir)
    elif os.environ.get(WORKDIR_ENV):
        root = Path(os.environ[WORKDIR_ENV])
    else:
        root = Path.cwd()
    root.mkdir(parents=True, exist_ok=True)
    return root


def _resolve(root: Path, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else root / p


def _resolve_task(name: str) -> str:
    name = _FAMILY_ALIASES.get(name, name)
    if name not in TASK_NAMES:
        raise UsageError(f"unknown task {name!r}; expected one of {TASK_NAMES} "
                         f"or a family alias {tuple(_FAMILY_ALIASES)}")
    return name


def _parse_seeds(text: str) -> tuple[int, ...]:
    try:
        seeds = tuple(int(s) for s in str(text).split(",") if s != "")
    except ValueError:
        raise UsageError(f"seeds must be comma-separated integers, got {text!r}")
    if not seeds:
        raise UsageError("need at least one seed")
    return seeds


# ---------------------------------------------------------------------------
# core operations (shared by flags and plan steps)
# ---------------------------------------------------------------------------

def _backbone_config(opts: dict) -> BackboneConfig:
    kind = opts.get("backbone", "mlp")
    if kind not in BACKBONE_KINDS:
        raise UsageError(f"unknown backbone {kind!r}; expected one of {BACKBONE_KINDS}")
    kw = {"kind": kind}
    for k in ("horizon", "action_dim", "d_model", "depth", "n_heads", "groups",
              "kernel", "tau_sin_dim", "tau_dim"):
        if opts.get(k) is not None:
            kw[k] = int(opts[k])
    if opts.get("dropout") is not None:
        kw["dropout"] = float(opts["dropout"])
    if opts.get("down_dims") is not None:
        dd = opts["down_dims"]
        if isinstance(dd, str):
            dd = tuple(int(x) for x in dd.split(","))
        kw["down_dims"] = tuple(int(x) for x in dd)
    return BackboneConfig(**kw)


def _train_config(stage: str, backbone: BackboneConfig, opts: dict) -> TrainConfig:
    kw = {"stage": stage, "backbone": backbone}
    for k, cast in (("epochs", int), ("batch_size", int), ("lr", float),
                    ("weight_decay", float), ("seed", int), ("timesteps", int),
                    ("save_every", int)):
        if opts.get(k) is not None:
            kw[k] = cast(opts[k])
    for k in ("schedule", "lr_schedule"):
        if opts.get(k) is not None:
            kw[k] = str(opts[k])
    if opts.get("ema_decay") is not None:
        kw["ema_decay"] = float(opts["ema_decay"])
    return TrainConfig(**kw)


def do_gen_data(opts: dict, root: Path) -> dict:
    source = opts.get("source")
    if source not in ("synthetic", "demo"):
        raise UsageError(f"--source must be 'synthetic' or 'demo', got {source!r}")
    out = _resolve(root, opts.get("out") or f"data/{source}.ofd")
    out.parent.mkdir(parents=True, exist_ok=True)
    seed = int(opts.get("seed", 0))
    horizon = int(opts.get("horizon", 16))
    n_obs = int(opts.get("n_obs", 2))
    n = int(opts.get("n", 100))

    if source == "synthetic":
        presets = family_presets()
        fam_text = opts.get("families", "IN_A,IN_C,IN_G")
        names = [f.strip() for f in str(fam_text).split(",") if f.strip()]
        unknown = [f for f in names if f not in presets]
        if unknown:
            raise UsageError(f"unknown families {unknown}; valid: {sorted(presets)}")
        chain = load_chain(opts.get("chain", "planar3"))
        ds = build_dataset(chain, [presets[f] for f in names], n_trajs=n,
                           horizon=horizon, n_obs=n_obs, seed=seed)
    else:
        task = make_task(_resolve_task(str(opts.get("task", "pick-center"))),
                         max_steps=int(opts.get("max_steps", 80)))
        ds = collect_demos(task, n_demos=n, seed=seed, horizon=horizon, n_obs=n_obs)

    sha = save_dataset(out, ds)
    summary = {
        "path": str(out),
        "sha256": sha,
        "kind": ds.kind,
        "n_samples": ds.n_samples,
        "n_obs": ds.n_obs,
        "cond_dim": ds.cond_dim,
        "horizon": ds.horizon,
        "action_dim": ds.action_dim,
    }
    print(f"wrote {out} ({ds.kind}, {ds.n_samples} windows, "
          f"cond {ds.n_obs}x{ds.cond_dim}, chunk {ds.horizon}x{ds.action_dim})")
    print(f"sha256 {sha}")
    print(f"cond range [{ds.stats.cond_min.min():.3f}, {ds.stats.cond_max.max():.3f}]  "
          f"action range [{ds.stats.act_min.min():.3f}, {ds.stats.act_max.max():.3f}]")
    return summary


def _finish_training(res, out: Path, metrics: Path) -> dict:
    counts = res.policy.param_counts()
    trainable = sum(p.size for p in res.policy.store.trainable())
    frozen = sum(p.size for p in res.policy.store.parameters()) - trainable
    print(f"wrote {out}")
    print(f"sha256 {res.checkpoint_sha}")
    print(f"loss {res.loss_history[0]:.6f} -> {res.final_loss:.6f} "
          f"over {len(res.loss_history)} epochs")
    print(f"params G={counts['G']} FTAU={counts['FTAU']} "
          f"PHI={counts['PHI']} FCOND={counts['FCOND']} "
          f"(trainable {trainable}, frozen {frozen})")
    print(f"metrics {metrics}")
    return {"path": str(out), "sha256": res.checkpoint_sha,
            "final_loss": res.final_loss, "counts": counts}


def do_pretrain(opts: dict, root: Path) -> dict:
    ds = load_dataset(_resolve(root, opts["data"]))
    bc = _backbone_config(opts)
    cfg = _train_config("stage1", bc, opts)
    out = _resolve(root, opts.get("out") or f"ck/{bc.kind}_stage1.dah")
    out.parent.mkdir(parents=True, exist_ok=True)
    metrics = _resolve(root, opts.get("metrics") or str(out) + ".metrics.csv")
    res = train_stage1(cfg, ds, out_path=out, metrics_path=metrics)
    return _finish_training(res, out, metrics)


def do_train(opts: dict, root: Path) -> dict:
    ds = load_dataset(_resolve(root, opts["data"]))
    bc = _backbone_config(opts)
    cfg = _train_config("normal", bc, opts)
    out = _resolve(root, opts.get("out") or f"ck/{bc.kind}_normal.dah")
    out.parent.mkdir(parents=True, exist_ok=True)
    metrics = _resolve(root, opts.get("metrics") or str(out) + ".metrics.csv")
    res = train_normal(cfg, ds, out_path=out, metrics_path=metrics)
    return _finish_training(res, out, metrics)


def do_finetune(opts: dict, root: Path) -> dict:
    if not opts.get("parent"):
        raise UsageError("finetune requires --parent (a stage-1 checkpoint)")
    parent_path = _resolve(root, opts["parent"])
    parent = load_checkpoint(parent_path)
    frozen_total = parent.param_count("G") + parent.param_count("FTAU")
    if frozen_total == 0:
        raise TrainError("parent checkpoint has no generator or timestep-encoder "
                         "parameters; nothing to freeze")
    ds = load_dataset(_resolve(root, opts["data"]))
    bc = BackboneConfig.from_dict(parent.meta["backbone"])
    cfg = _train_config("stage2", bc, opts)
    out = _resolve(root, opts.get("out") or f"ck/{bc.kind}_decoupled.dah")
    out.parent.mkdir(parents=True, exist_ok=True)
    metrics = _resolve(root, opts.get("metrics") or str(out) + ".metrics.csv")
    res = train_stage2(cfg, parent_path, ds, out_path=out, metrics_path=metrics)
    return _finish_training(res, out, metrics)


def do_eval(opts: dict, root: Path) -> dict:
    ck = _resolve(root, opts["checkpoint"])
    task = make_task(_resolve_task(str(opts.get("task", "pick-center"))),
                     max_steps=int(opts.get("max_steps", 80)))
    seeds = opts.get("seeds", (0, 1, 2))
    if isinstance(seeds, str):
        seeds = _parse_seeds(seeds)
    rep = evaluate(ck, task,
                   n_rollouts=int(opts.get("n_rollouts", 50)),
                   seeds=tuple(int(s) for s in seeds),
                   exec_steps=int(opts.get("exec_steps", 8)),
                   sampler=str(opts.get("sampler", "ddim")),
                   k=int(opts.get("k", 16)))
    print(f"task {rep.task}  checkpoint {rep.checkpoint_sha[:12]}")
    print(f"{'seed':>6s} {'success':>9s}")
    for s, r in zip(rep.seeds, rep.success_per_seed):
        print(f"{s:6d} {r:9.2%}")
    print(f"{'mean':>6s} {rep.mean_success:9.2%}   mean episode length {rep.mean_length:.1f}")
    if opts.get("json"):
        out = _resolve(root, opts["json"])
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True))
        print(f"wrote {out}")
    return rep.to_dict()


def do_bench(opts: dict, root: Path) -> dict:
    kinds_text = opts.get("backbones", "mlp,conv_unet")
    kinds = [k.strip() for k in str(kinds_text).split(",") if k.strip()]
    unknown = [k for k in kinds if k not in BACKBONE_KINDS]
    if unknown:
        raise UsageError(f"unknown backbones {unknown}; valid: {BACKBONE_KINDS}")
    modes_text = opts.get("modes", "normal,decoupled")
    modes = [m.strip() for m in str(modes_text).split(",") if m.strip()]
    n_timed = int(opts.get("n_timed", 30))
    if n_timed < 10:
        raise UsageError(f"--n-timed must be at least 10, got {n_timed}")
    reports = []
    for kind in kinds:
        for mode in modes:
            r = run_bench(kind, mode,
                          batch_size=int(opts.get("batch_size", 64)),
                          n_timed=n_timed,
                          warmup=int(opts.get("warmup", 5)),
                          windows=int(opts.get("windows", 5)),
                          seed=int(opts.get("seed", 0)))
            reports.append(r)
            print(f"{kind:18s} {mode:10s} {r.iters_per_s:8.2f} it/s "
                  f"(mean {r.iters_mean:.2f}, std {r.iters_std:.2f}, "
                  f"batch {r.batch_size}, trainable {r.trainable})")
    rows = comparison_rows(reports)
    print(f"\n{'backbone':18s} {'normal':>10s} {'decoupled':>10s} {'speedup':>9s}")
    for row in rows:
        sp = f"{row['speedup_pct']:+8.1f}%" if row["speedup_pct"] is not None else "      n/a"
        nm = f"{row['normal']:10.2f}" if row["normal"] else "       n/a"
        dc = f"{row['decoupled']:10.2f}" if row["decoupled"] else "       n/a"
        print(f"{row['backbone']:18s} {nm} {dc} {sp}")
    result = {"reports": [r.to_dict() for r in reports], "comparison": rows}
    if opts.get("json"):
        out = _resolve(root, opts["json"])
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(result, indent=2, sort_keys=True))
        print(f"wrote {out}")
    return result


def do_report(opts: dict, root: Path) -> dict:
    success_rows = []
    for row in opts.get("success", []):
        data = json.loads(_resolve(root, row["eval_json"]).read_text())
        success_rows.append({
            "task": data["task"],
            "backbone": row["backbone"],
            "mode": row["mode"],
            "mean_success": data["mean_success"],
        })
    bench_rows = []
    if opts.get("bench_json"):
        bench_rows = json.loads(_resolve(root, opts["bench_json"]).read_text())["comparison"]
    outdir = _resolve(root, opts.get("out", "report"))
    written = write_report(outdir, success_rows or None, bench_rows or None)
    for key, path in written.items():
        print(f"wrote {path}")
    return written


# ---------------------------------------------------------------------------
# inspect
# ---------------------------------------------------------------------------

def _first_mismatch(blob: bytes, expected: bytes) -> int:
    for i, (a, b) in enumerate(zip(blob, expected)):
        if a != b:
            return i
    return min(len(blob), len(expected))


def inspect_checkpoint_blob(blob: bytes) -> dict:
    if len(blob) < 4 or blob[:4] != ckmod.MAGIC:
        off = _first_mismatch(blob[:4], ckmod.MAGIC)
        raise FormatError(f"bad checkpoint magic at byte offset {off}")
    if len(blob) < 8:
        raise FormatError(f"truncated header at byte offset {len(blob)}")
    (mlen,) = struct.unpack("<I", blob[4:8])
    if len(blob) < 8 + mlen:
        raise FormatError(f"truncated manifest at byte offset {len(blob)} "
                          f"(expected {8 + mlen} bytes)")
    try:
        manifest = json.loads(blob[8:8 + mlen].decode("utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"manifest not valid JSON at byte offset {8 + e.pos}") from None
    except UnicodeDecodeError as e:
        raise FormatError(f"manifest not utf-8 at byte offset {8 + e.start}") from None
    if manifest.get("format_version") != ckmod.FORMAT_VERSION:
        raise FormatError(f"unsupported format version "
                          f"{manifest.get('format_version')} at byte offset 8")
    payload = blob[8 + mlen:]
    for name, entry in sorted(manifest.get("params", {}).items()):
        n = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
        end = entry["offset"] + 4 * n
        if end > len(payload):
            raise FormatError(f"payload too short for {name!r}: needs byte offset "
                              f"{8 + mlen + end}, file ends at {len(blob)}")
    digest = hashlib.sha256(payload).hexdigest()
    if digest != manifest.get("payload_sha256"):
        raise FormatError(f"payload hash mismatch; payload begins at byte offset {8 + mlen}")
    counts: dict[str, int] = {}
    for name, entry in manifest["params"].items():
        n = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
        counts[entry["partition"]] = counts.get(entry["partition"], 0) + n
    return {
        "type": "checkpoint",
        "format_version": manifest["format_version"],
        "partition_counts": counts,
        "n_params": len(manifest["params"]),
        "payload_sha256": manifest["payload_sha256"],
        "meta": manifest.get("meta", {}),
    }


def inspect_dataset_blob(blob: bytes) -> dict:
    hs = dsmod._HEADER.size
    if len(blob) < 4 or blob[:4] != dsmod.MAGIC:
        off = _first_mismatch(blob[:4], dsmod.MAGIC)
        raise FormatError(f"bad dataset magic at byte offset {off}")
    if len(blob) < hs:
        raise FormatError(f"truncated dataset header at byte offset {len(blob)}")
    (_, version, kind_code, _res, n_samples, n_obs, cond_dim,
     horizon, action_dim, seed) = dsmod._HEADER.unpack(blob[:hs])
    if version != dsmod.FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version} at byte offset 4")
    if kind_code not in (0, 1):
        raise FormatError(f"unknown dataset kind {kind_code} at byte offset 6")
    stats_bytes = 4 * (2 * cond_dim + 2 * action_dim)
    sample_bytes = 4 * (n_obs * cond_dim + horizon * action_dim)
    expected = hs + stats_bytes + n_samples * sample_bytes
    if len(blob) != expected:
        raise FormatError(f"dataset length mismatch at byte offset "
                          f"{min(len(blob), expected)}: header promises "
                          f"{expected} bytes, file has {len(blob)}")
    return {
        "type": "dataset",
        "format_version": version,
        "kind": dsmod.KINDS[kind_code],
        "n_samples": n_samples,
        "n_obs": n_obs,
        "cond_dim": cond_dim,
        "horizon": horizon,
        "action_dim": action_dim,
        "seed": seed,
    }


def _looks_like(blob: bytes, magic: bytes) -> bool:
    if blob[:4] == magic:
        return True
    # a near-miss magic is a corrupted file of that format, not a foreign one
    return sum(a != b for a, b in zip(blob[:4], magic)) <= 2 and len(blob) >= 4


def do_inspect(opts: dict, root: Path) -> dict:
    path = _resolve(root, opts["path"])
    if not path.exists():
        raise FormatError(f"file not found: {path}")
    blob = path.read_bytes()
    if _looks_like(blob, ckmod.MAGIC) and not _looks_like(blob, dsmod.MAGIC):
        info = inspect_checkpoint_blob(blob)
        print(f"checkpoint {path}")
        print(f"format version {info['format_version']}")
        print(f"file sha256 {hashlib.sha256(blob).hexdigest()}")
        print(f"payload sha256 {info['payload_sha256']}")
        for part in ("G", "FTAU", "PHI", "FCOND"):
            print(f"  {part:6s} {info['partition_counts'].get(part, 0):>10d} params")
        meta = info["meta"]
        if "backbone" in meta:
            print(f"backbone {json.dumps(meta['backbone'], sort_keys=True)}")
        if "train" in meta:
            t = meta["train"]
            print(f"stage {t.get('stage')}  epochs {t.get('epochs')}  seed {t.get('seed')}")
            print(f"dataset sha256 {t.get('dataset_sha256')}")
            if t.get("parent_sha256"):
                print(f"parent sha256 {t.get('parent_sha256')}")
    elif _looks_like(blob, dsmod.MAGIC):
        info = inspect_dataset_blob(blob)
        print(f"dataset {path}")
        print(f"format version {info['format_version']}")
        print(f"file sha256 {hashlib.sha256(blob).hexdigest()}")
        print(f"kind {info['kind']}  samples {info['n_samples']}  "
              f"cond {info['n_obs']}x{info['cond_dim']}  "
              f"chunk {info['horizon']}x{info['action_dim']}  seed {info['seed']}")
        sidecar = path.with_suffix(path.suffix + ".json")
        if sidecar.exists():
            side = json.loads(sidecar.read_text())
            fields = ("kind", "n_samples", "n_obs", "cond_dim", "horizon", "action_dim")
            mismatched = [f for f in fields if side.get(f) != info[f]]
            if mismatched:
                raise FormatError(f"sidecar disagrees with header on {mismatched}")
            print("sidecar matches header")
    else:
        raise FormatError(f"unrecognized file magic at byte offset 0: {blob[:4]!r}")
    return info


# ---------------------------------------------------------------------------
# repro plans
# ---------------------------------------------------------------------------

_PLAN_COMMANDS = {
    "gen-data": do_gen_data,
    "pretrain": do_pretrain,
    "train": do_train,
    "finetune": do_finetune,
    "eval": do_eval,
    "bench": do_bench,
    "report": do_report,
}


def _load_plan(source, root: Path) -> tuple[dict, str]:
    src = str(source)
    if src.endswith(".json") or "/" in src:
        path = _resolve(root, src)
        if not path.exists():
            raise FormatError(f"plan not found: {path}")
        text = path.read_text()
        name = path.stem
    else:
        ref = resources.files("actionhead").joinpath(f"plans/{src}.json")
        if not ref.is_file():
            raise UsageError(f"unknown plan {src!r}; ship your own JSON or use a "
                             f"packaged plan name")
        text = ref.read_text()
        name = src
    try:
        plan = json.loads(text)
    except json.JSONDecodeError as e:
        raise FormatError(f"plan is not valid JSON: {e}") from None
    if not isinstance(plan.get("steps"), list) or not plan["steps"]:
        raise FormatError("plan must contain a non-empty 'steps' list")
    return plan, plan.get("name", name)


def _step_signature(step: dict, root: Path) -> str:
    h = hashlib.sha256()
    h.update(json.dumps({"command": step["command"], "args": step.get("args", {})},
                        sort_keys=True, separators=(",", ":")).encode())
    for rel in step.get("inputs", []):
        p = _resolve(root, rel)
        h.update(rel.encode())
        h.update(file_sha256(p).encode() if p.exists() else b"missing")
    return h.hexdigest()


def _outputs_intact(step: dict, record: dict, root: Path) -> bool:
    for rel in step.get("outputs", []):
        p = _resolve(root, rel)
        if not p.exists():
            return False
        if record.get("output_hashes", {}).get(rel) != file_sha256(p):
            return False
    return True


def do_repro(opts: dict, root: Path) -> dict:
    plan, name = _load_plan(opts["plan"], root)
    lock = root / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise TrainError(f"another plan is running in {root} (lock file {lock}); "
                         f"remove it if that run is dead") from None
    os.write(fd, f"plan {name} pid {os.getpid()}\n".encode())
    os.close(fd)
    state_path = root / f"{name}.state.json"
    state = json.loads(state_path.read_text()) if state_path.exists() else {}
    ran, skipped = 0, 0
    try:
        for i, step in enumerate(plan["steps"]):
            cmd = step.get("command")
            if cmd not in _PLAN_COMMANDS:
                raise FormatError(f"step {i}: unknown command {cmd!r}")
            sig = _step_signature(step, root)
            key = str(i)
            record = state.get(key, {})
            if record.get("signature") == sig and _outputs_intact(step, record, root):
                print(f"[{i + 1}/{len(plan['steps'])}] {cmd} -- cached, skipping")
                skipped += 1
                continue
            print(f"[{i + 1}/{len(plan['steps'])}] {cmd}")
            _PLAN_COMMANDS[cmd](dict(step.get("args", {})), root)
            out_hashes = {}
            for rel in step.get("outputs", []):
                p = _resolve(root, rel)
                if not p.exists():
                    raise TrainError(f"step {i} ({cmd}) did not produce "
                                     f"declared output {rel}")
                out_hashes[rel] = file_sha256(p)
            state[key] = {"signature": sig, "output_hashes": out_hashes}
            state_path.write_text(json.dumps(state, indent=2, sort_keys=True))
            ran += 1
    finally:
        lock.unlink(missing_ok=True)
    print(f"plan {name}: {ran} steps ran, {skipped} cached")
    return {"plan": name, "ran": ran, "skipped": skipped}


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_workdir(p):
    p.add_argument("--workdir", help=f"artifact root (default: ${WORKDIR_ENV} or cwd)")


def _add_backbone_flags(p):
    p.add_argument("--backbone", default="mlp", help="mlp | conv_unet | "
                   "transformer_xattn | transformer_film")
    p.add_argument("--horizon", type=int)
    p.add_argument("--d-model", dest="d_model", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--n-heads", dest="n_heads", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--down-dims", dest="down_dims", help="e.g. 64,128,256")
    p.add_argument("--groups", type=int)
    p.add_argument("--kernel", type=int)


def _add_train_flags(p):
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--metrics")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--timesteps", type=int)
    p.add_argument("--schedule")
    p.add_argument("--lr-schedule", dest="lr_schedule")
    p.add_argument("--ema-decay", dest="ema_decay", type=float)
    p.add_argument("--save-every", dest="save_every", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="actionhead",
        description="Two-stage diffusion action-head training on planar toy tasks")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a training dataset")
    _add_workdir(p)
    p.add_argument("--source", required=True, choices=("synthetic", "demo"))
    p.add_argument("--out")
    p.add_argument("--n", type=int, default=100,
                   help="trajectories (synthetic) or demos (demo)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--horizon", type=int, default=16)
    p.add_argument("--n-obs", dest="n_obs", type=int, default=2)
    p.add_argument("--chain", default="planar3")
    p.add_argument("--families", default="IN_A,IN_C,IN_G")
    p.add_argument("--task", default="pick-center")
    p.add_argument("--max-steps", dest="max_steps", type=int, default=80)
    p.set_defaults(fn=lambda a: do_gen_data(vars(a), _workdir(a)))

    p = sub.add_parser("pretrain", help="stage 1: observation-free pretraining")
    _add_workdir(p)
    _add_backbone_flags(p)
    _add_train_flags(p)
    p.set_defaults(fn=lambda a: do_pretrain(vars(a), _workdir(a)))

    p = sub.add_parser("train", help="single-stage baseline training on demos")
    _add_workdir(p)
    _add_backbone_flags(p)
    _add_train_flags(p)
    p.set_defaults(fn=lambda a: do_train(vars(a), _workdir(a)))

    p = sub.add_parser("finetune", help="stage 2: frozen-generator fine-tuning")
    _add_workdir(p)
    _add_train_flags(p)
    p.add_argument("--parent", required=True, help="stage-1 checkpoint")
    p.set_defaults(fn=lambda a: do_finetune(vars(a), _workdir(a)))

    p = sub.add_parser("eval", help="receding-horizon rollout evaluation")
    _add_workdir(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", default="pick-center")
    p.add_argument("--n-rollouts", dest="n_rollouts", type=int, default=50)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--exec-steps", dest="exec_steps", type=int, default=8)
    p.add_argument("--sampler", default="ddim", choices=("ddim", "ddpm"))
    p.add_argument("--k", type=int, default=16)
    p.add_argument("--max-steps", dest="max_steps", type=int, default=80)
    p.add_argument("--json")
    p.set_defaults(fn=lambda a: do_eval(vars(a), _workdir(a)))

    p = sub.add_parser("bench", help="training throughput benchmark")
    _add_workdir(p)
    p.add_argument("--backbones", default="mlp,conv_unet")
    p.add_argument("--modes", default="normal,decoupled")
    p.add_argument("--batch-size", dest="batch_size", type=int, default=64)
    p.add_argument("--n-timed", dest="n_timed", type=int, default=30)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--windows", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json")
    p.set_defaults(fn=lambda a: do_bench(vars(a), _workdir(a)))

    p = sub.add_parser("inspect", help="print a file's manifest")
    _add_workdir(p)
    p.add_argument("path")
    p.set_defaults(fn=lambda a: do_inspect(vars(a), _workdir(a)))

    p = sub.add_parser("repro", help="run an experiment plan with hash caching")
    _add_workdir(p)
    p.add_argument("--plan", required=True,
                   help="packaged plan name or path to a plan JSON")
    p.set_defaults(fn=lambda a: do_repro(vars(a), _workdir(a)))

    return parser


_FORMAT_ERRORS = (FormatError, dsmod.FormatError, KinematicsError)
_RUNTIME_ERRORS = (TrainError, EnvError, BenchError, ReportError, GradError,
                   DiffusionError, TrajGenError)


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("ACTIONHEAD_LOGLEVEL", "WARNING"),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        args.fn(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except _FORMAT_ERRORS as e:
        print(f"input error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except FileNotFoundError as e:
        print(f"input error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except _RUNTIME_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
