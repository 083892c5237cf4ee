"""Command-line entry point.

    compinv {corpus,pretrain,invert,compose,layout-train,evaluate,sweep-lambda,all}
            [--config PATH|default|smoke] [--seed N] [--method ti|semantic]
            [--spatial on|off] [--lambdas 0,0.5,1] [--out DIR]

Exit codes:

    0  success
    1  unexpected internal error
    2  configuration error (bad file, unknown key, value out of range, bad flags)
    3  data error (missing corpus/checkpoint/images, layout dataset yield too low)
    4  numeric error (non-finite loss or gradient)
    5  contract violation inside the library
    6  quality gate failed (pretrained model below the single-concept likelihood bar)
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from contextlib import contextmanager
from pathlib import Path

from . import pipeline
from .config import load_config
from .errors import CompinvError, ConfigError, GateError

log = logging.getLogger("compinv")

COMMANDS = ("corpus", "pretrain", "invert", "compose", "layout-train", "evaluate", "sweep-lambda", "all")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="compinv", description="Compositional concept inversion on a toy diffusion model.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", default=None, help="TOML run config, or a packaged profile name (default, smoke)")
    p.add_argument("--seed", type=int, default=None, help="override the master seed")
    p.add_argument("--method", choices=("ti", "semantic"), default=None, help="inversion method (invert, compose)")
    p.add_argument("--spatial", choices=("on", "off"), default="off", help="latent guidance while composing")
    p.add_argument("--lambdas", default=None, help="comma-separated lambda list for sweep-lambda")
    p.add_argument("--out", default=None, help="run directory (default runs/<config hash>)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _lambdas(text: str | None):
    if text is None:
        return None
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"--lambdas: {exc}") from exc


@contextmanager
def _timed(out: Path, name: str):
    """Wall-clock seconds per stage, kept apart from the hashed outputs."""
    t0 = time.perf_counter()
    yield
    path = out / "timings.json"
    data = json.loads(path.read_text()) if path.exists() else {}
    elapsed = round(time.perf_counter() - t0, 1)
    # stages skipped as up to date finish in well under a second; keep the build time
    if elapsed >= 1.0:
        data[name] = elapsed
    path.write_text(json.dumps(data, indent=1, sort_keys=True))


def run(args: argparse.Namespace) -> dict:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    out = Path(args.out or f"runs/{cfg.hash}")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps({"hash": cfg.hash, "config": cfg.to_dict()}, indent=1, sort_keys=True))
    cmd = args.command
    argv = {k: v for k, v in vars(args).items() if k not in ("verbose",)}
    methods = [args.method] if args.method else list(pipeline.METHODS)
    result: dict = {"out": str(out), "config_hash": cfg.hash}

    if cmd in ("corpus", "all"):
        with _timed(out, "corpus"):
            result["corpus"] = pipeline.run_corpus(cfg, out)
        pipeline.record_run(out, "corpus", cfg, argv, [out / "corpus"])
    if cmd in ("pretrain", "all"):
        with _timed(out, "pretrain"):
            gate = pipeline.run_pretrain(cfg, out)
        result["gate"] = gate
        pipeline.record_run(out, "pretrain", cfg, argv, [out / "model.ckpt", out / "pretrain_curve.csv",
                                                         out / "gate.json"])
        if not gate["passed"]:
            raise GateError(f"pretraining gate failed: min likelihood {gate['min']:.3f} "
                            f"< {gate['threshold']} (see {out / 'gate.json'})")
    if cmd in ("invert", "all"):
        for m in methods:
            with _timed(out, f"invert:{m}"):
                ckpt = pipeline.run_invert(cfg, out, m)
            pipeline.record_run(out, f"invert:{m}", cfg, argv, [ckpt, out / "inversions" / m])
    if cmd in ("layout-train", "all"):
        with _timed(out, "layout-train"):
            result["layout"] = pipeline.run_layout_train(cfg, out)
        pipeline.record_run(out, "layout-train", cfg, argv, [out / "layout"])
    if cmd in ("compose", "all"):
        spatial_modes = [args.spatial == "on"] if cmd == "compose" else [False, True]
        for m in methods:
            for sp in spatial_modes:
                with _timed(out, f"compose:{m}{'+spatial' if sp else ''}"):
                    d = pipeline.run_compose(cfg, out, m, sp)
                pipeline.record_run(out, f"compose:{d.name}", cfg, argv, [d])
    if cmd in ("evaluate", "all"):
        with _timed(out, "evaluate"):
            report = pipeline.run_evaluate(cfg, out)
        result["aggregates"] = report.aggregates()
        pipeline.record_run(out, "evaluate", cfg, argv, [out / "reports"])
    if cmd in ("sweep-lambda", "all"):
        with _timed(out, "sweep-lambda"):
            result["sweep"] = pipeline.run_sweep(cfg, out, _lambdas(args.lambdas))
        pipeline.record_run(out, "sweep-lambda", cfg, argv, [out / "sweep" / "summary.csv"])
    return result


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and ConfigError.exit_code
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        result = run(args)
    except CompinvError as exc:
        print(f"compinv: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # noqa: BLE001 - last-resort reporting
        log.exception("unexpected failure")
        print(f"compinv: internal error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(result, indent=1, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
