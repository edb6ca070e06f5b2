"""Command-line entry point: ``python -m wildsplat <command> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields, is_dataclass
from pathlib import Path

import numpy as np

from .io import (DataError, camera_from_dict, camera_to_dict, load_checkpoint, load_dataset,
                 save_checkpoint, write_image)
from .losses import LossConfig
from .scene import SceneConfig
from .synth import SynthConfig, synth_scene
from .trainer import (NumericAbort, TrainConfig, adapt_embeddings, evaluate, occlusion_auc,
                      render_view, train)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("wildsplat")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--config", type=Path, default=None,
                        help="JSON file with 'synth', 'train', 'scene' and 'loss' sections")
    common.add_argument("--threads", type=int, default=None)
    common.add_argument("--out", type=Path, default=None)

    p = _Parser(prog="wildsplat", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    sub.add_parser("synth", parents=[common], help="write a synthetic dataset")

    t = sub.add_parser("train", parents=[common], help="train from a dataset manifest")
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--iters", type=int, default=None)

    r = sub.add_parser("render", parents=[common], help="render a view from a checkpoint")
    r.add_argument("--ckpt", type=Path, required=True)
    r.add_argument("--pose", required=True, help="image id or camera JSON file")
    r.add_argument("--light-from", default=None, help="image id whose light embedding to use")
    r.add_argument("--embeddings", type=Path, default=None)

    a = sub.add_parser("adapt", parents=[common], help="fit test-image embeddings")
    a.add_argument("--ckpt", type=Path, required=True)
    a.add_argument("--data", type=Path, required=True)
    a.add_argument("--image", action="append", default=None,
                   help="image id (repeatable); default: every test image")
    a.add_argument("--iters", type=int, default=None)

    e = sub.add_parser("eval", parents=[common], help="evaluate on held-out images")
    e.add_argument("--ckpt", type=Path, required=True)
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--embeddings", type=Path, default=None,
                   help="adapted embeddings; adapts internally when omitted")
    e.add_argument("--report", type=Path, default=None)
    return p


def _update(obj, overrides: dict, where: str):
    names = {f.name: f for f in fields(obj)}
    for key, val in overrides.items():
        if key not in names:
            raise UsageError(f"--config: unknown key {where}.{key}")
        cur = getattr(obj, key)
        if is_dataclass(cur):
            _update(cur, val, f"{where}.{key}")
        else:
            setattr(obj, key, tuple(val) if isinstance(cur, tuple) else val)
    return obj


def resolve_config(args) -> dict:
    cfg = {"synth": SynthConfig(), "train": TrainConfig(), "scene": SceneConfig(),
           "loss": LossConfig()}
    if args.config is not None:
        try:
            raw = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise DataError(f"{args.config}: config file not found") from None
        except json.JSONDecodeError as exc:
            raise DataError(f"{args.config}: {exc}") from None
        for section, vals in raw.items():
            if section not in cfg:
                raise UsageError(f"--config: unknown section {section!r}")
            _update(cfg[section], vals, section)
    tc = cfg["train"]
    tc.scene, tc.loss = cfg["scene"], cfg["loss"]
    if args.seed is not None:
        cfg["synth"].seed = args.seed
        tc.seed = args.seed
    if args.threads is not None:
        tc.threads = args.threads
    if getattr(args, "iters", None) is not None:
        if args.command == "adapt":
            tc.adapt_iterations = args.iters
        else:
            tc.iterations = args.iters
    return cfg


def _print_config(cfg: dict, out) -> None:
    flat = {"synth": asdict(cfg["synth"])}
    flat["train"] = {k: v for k, v in asdict(cfg["train"]).items() if k not in ("scene", "loss")}
    flat["scene"] = asdict(cfg["scene"])
    flat["loss"] = asdict(cfg["loss"])
    for section, vals in flat.items():
        for k, v in vals.items():
            print(f"config.{section}.{k}={json.dumps(v)}", file=out)


def _require_out(args) -> Path:
    if args.out is None:
        raise UsageError(f"{args.command}: --out is required")
    return args.out


def _load_embeddings(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise DataError(f"{path}: embeddings file not found") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: {exc}") from None
    return {k: (np.asarray(v["light"], float), np.asarray(v["transient"], float))
            for k, v in raw.items()}


def _save_embeddings(path, emb: dict) -> None:
    data = {k: {"light": l.tolist(), "transient": t.tolist()} for k, (l, t) in emb.items()}
    Path(path).write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")


def _select(dataset, ids):
    if not ids:
        return dataset.test
    recs = []
    for iid in ids:
        try:
            recs.append(dataset.get(iid))
        except KeyError:
            raise DataError(f"--image: unknown image id {iid!r}") from None
    return recs


def _adapt_all(model, records, tc: TrainConfig) -> dict:
    return {rec.id: adapt_embeddings(model, rec, tc.adapt_iterations, tc.adapt_lr,
                                     loss_cfg=tc.loss, tile_size=tc.tile_size)
            for rec in records}


def cmd_synth(args, cfg, out) -> int:
    dest = _require_out(args)
    path = synth_scene(cfg["synth"], dest)
    print(f"manifest={path}", file=out)
    return EXIT_OK


def cmd_train(args, cfg, out) -> int:
    dest = _require_out(args)
    ds = load_dataset(args.data)
    dest.parent.mkdir(parents=True, exist_ok=True)
    ckpt, hist = train(ds, cfg["train"])
    ckpt.meta["cameras"] = {r.id: camera_to_dict(r.camera) for r in ds.images}
    save_checkpoint(dest, ckpt)
    final = hist[-1].as_dict() if hist else {}
    for k, v in final.items():
        print(f"final.{k}={v:.6g}", file=out)
    print(f"kernels={len(ckpt.model.kernels)}", file=out)
    print(f"checkpoint={dest}", file=out)
    return EXIT_OK


def _pose_camera(ckpt, pose: str):
    cams = ckpt.meta.get("cameras", {})
    if pose in cams:
        return camera_from_dict(cams[pose])
    p = Path(pose)
    if p.exists():
        try:
            return camera_from_dict(json.loads(p.read_text()))
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            raise DataError(f"--pose {pose}: {exc}") from None
    raise DataError(f"--pose: {pose!r} is neither a known image id nor a camera file")


def cmd_render(args, cfg, out) -> int:
    dest = _require_out(args)
    ckpt = load_checkpoint(args.ckpt)
    model = ckpt.model
    cam = _pose_camera(ckpt, args.pose)
    emb = _load_embeddings(args.embeddings) if args.embeddings else {}
    light_id = args.light_from or args.pose
    if light_id in emb:
        light, trans = emb[light_id]
    elif light_id in model.image_ids:
        light, trans = light_id, None
    elif args.light_from is not None:
        raise DataError(f"--light-from: unknown image id {args.light_from!r}")
    else:
        light, trans = np.zeros(model.light_dim), np.zeros(model.transient_dim)
    res = render_view(model, cam, light, trans, cfg["train"].tile_size)
    dest.parent.mkdir(parents=True, exist_ok=True)
    write_image(dest, np.clip(res.mapped, 0.0, 1.0))
    print(f"image={dest}", file=out)
    return EXIT_OK


def cmd_adapt(args, cfg, out) -> int:
    dest = _require_out(args)
    ckpt = load_checkpoint(args.ckpt)
    ds = load_dataset(args.data)
    emb = _adapt_all(ckpt.model, _select(ds, args.image), cfg["train"])
    dest.parent.mkdir(parents=True, exist_ok=True)
    _save_embeddings(dest, emb)
    print(f"embeddings={dest}", file=out)
    return EXIT_OK


def cmd_eval(args, cfg, out) -> int:
    ckpt = load_checkpoint(args.ckpt)
    ds = load_dataset(args.data)
    tc = cfg["train"]
    if args.embeddings is not None:
        emb = _load_embeddings(args.embeddings)
    else:
        emb = _adapt_all(ckpt.model, ds.test, tc)
    try:
        report = evaluate(ckpt.model, ds.test, emb, tile_size=tc.tile_size)
    except KeyError as exc:
        raise DataError(f"--embeddings: {exc.args[0]}") from None
    if any(r.occluder_mask is not None for r in ds.train):
        report.occlusion_auc = occlusion_auc(ckpt.model, ds.train, tc.tile_size)
    text = report.to_text()
    dest = args.report or args.out
    if dest is not None:
        Path(dest).parent.mkdir(parents=True, exist_ok=True)
        Path(dest).write_text(text)
    out.write(text)
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "render": cmd_render,
            "adapt": cmd_adapt, "eval": cmd_eval}


def run(argv=None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        cfg = resolve_config(args)
        if not logging.getLogger().handlers:
            logging.basicConfig(level=logging.INFO, format="%(message)s", stream=err)
        _print_config(cfg, out)
        return COMMANDS[args.command](args, cfg, out)
    except UsageError as exc:
        print(str(exc).rstrip(), file=err)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=err)
        return EXIT_DATA
    except NumericAbort as exc:
        print(f"error: {exc}", file=err)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=err)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())
