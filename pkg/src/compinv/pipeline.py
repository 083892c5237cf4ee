"""Stage implementations behind the command line.

Every stage reads and writes under one run directory and records a stamp
file holding the hash of the config sections it depends on. A stage whose
stamp matches is skipped; anything else recomputes from scratch, so a
re-run with an unchanged config either skips or reproduces identical bytes.

Run directory layout::

    corpus/                 train/, user/<concept>/, manifest.json, detector_calibration.json
    model.ckpt              pretrained weights (+ optimizer state while training)
    pretrain_curve.csv      per-step loss
    gate.json               single-concept likelihoods of the pretrained model
    inversions/<method>/    one CSV log per concept; <method>.ckpt holds the pseudo rows
    layout/                 dataset.csv, layout.ckpt, report.json
    compose/<variant>/<concept>__<partner>/   seedNNN.png, attention.ckpt
    probes/<method>/<concept>__<partner>.ckpt
    reports/                metrics.csv, summary.json, attention.json, entropy.json, ...
    sweep/                  lambda_<v>/..., summary.csv
    run_manifest.json       per command: config hash, arguments, output digests
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import checkpoint
from .config import RunConfig, partner_pool
from .diffusion import Denoiser, DiffusionModel, NoiseSchedule, PretrainConfig, build_model, pretrain, sample
from .errors import ConfigError, DataError, GateError
from .evaluation import (
    SUBSTITUTIONS, MetricReport, TaskRow, attention_similarity_series, coi_likelihood, image_alignment,
    text_alignment_proxy,
)
from .numerics import RngStream, stable_hash
from .scene_corpus import (
    HELD_OUT_CONCEPTS, PRETRAIN_CONCEPTS, SUPERCLASS, BBox, load_manifest, load_png, load_split, save_png,
    write_corpus,
)
from .semantic import AnchorSet, InversionConfig, embedding_entropy, invert
from .spatial import (
    LayoutDataset, LayoutPredictor, LayoutRecord, build_layout_dataset, in_mask_fraction, make_guidance_hook, noun_groups,
    prompt_masks, train_layout_predictor,
)
from .text_encoder import TextEncoder, Vocabulary

log = logging.getLogger(__name__)

METHODS = ("ti", "semantic")
VARIANTS = {"ti": ("ti", False), "ti+spatial": ("ti", True),
            "semantic": ("semantic", False), "semantic+spatial": ("semantic", True)}


# ------------------------------------------------------------------ plumbing


def stage_hash(cfg: RunConfig, *sections: str, extra=None) -> str:
    d = cfg.to_dict()
    payload = {s: d[s] for s in sections}
    payload["seed"] = cfg.seed
    if extra is not None:
        payload["extra"] = extra
    return stable_hash(json.dumps(payload, sort_keys=True).encode())[:16]


def _stamp_path(path: Path) -> Path:
    return path / ".stamp.json" if path.suffix == "" else path.with_name(path.name + ".stamp.json")


def is_current(path: Path, key: str) -> bool:
    sp = _stamp_path(path)
    return path.exists() and sp.exists() and json.loads(sp.read_text()).get("key") == key


def stamp(path: Path, key: str, **info) -> None:
    _stamp_path(path).write_text(json.dumps({"key": key, **info}, indent=1, sort_keys=True))


def file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def record_run(out: Path, command: str, cfg: RunConfig, args: dict, outputs: list[Path]) -> None:
    """Update run_manifest.json with the digests of a command's outputs."""
    mpath = out / "run_manifest.json"
    manifest = json.loads(mpath.read_text()) if mpath.exists() else {}
    files = {}
    for o in outputs:
        o = Path(o)
        items = sorted(p for p in o.rglob("*") if p.is_file()) if o.is_dir() else [o] if o.exists() else []
        for p in items:
            if p.name.endswith(".stamp.json") or p.suffix == ".tmp":
                continue
            files[str(p.relative_to(out))] = file_digest(p)
    manifest[command] = {"config_hash": cfg.hash, "args": args, "outputs": files}
    mpath.write_text(json.dumps(manifest, indent=1, sort_keys=True))


def _write_csv(path: Path, header: list[str], rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


# --------------------------------------------------------------- model files


def model_tensors(model: DiffusionModel) -> dict[str, torch.Tensor]:
    return {f"model/{k}": v for k, v in model.state_dict().items()}


def model_meta(model: DiffusionModel, arch: PretrainConfig) -> dict:
    v = model.encoder.vocab
    return {
        "vocab": {"tokens": v.tokens, "noun_flags": v.noun_flags, "kinds": v.kinds},
        "schedule": model.schedule.to_dict(),
        "arch": {"dim": arch.dim, "ch": arch.ch, "ch2": arch.ch2, "tdim": arch.tdim},
    }


def save_model(path: Path, model: DiffusionModel, arch: PretrainConfig, extra_tensors=None, **meta) -> None:
    tensors = model_tensors(model)
    tensors.update(extra_tensors or {})
    checkpoint.save(path, tensors, {**model_meta(model, arch), **meta})


def load_model(path: Path) -> tuple[DiffusionModel, dict, dict]:
    """Rebuild a model from a checkpoint. Returns (model, meta, non-model tensors)."""
    tensors, meta = checkpoint.load(path)
    v = meta["vocab"]
    vocab = Vocabulary(list(v["tokens"]), list(v["noun_flags"]), list(v["kinds"]))
    arch = meta["arch"]
    enc = TextEncoder(vocab, dim=arch["dim"])
    den = Denoiser(ctx_dim=arch["dim"], ch=arch["ch"], ch2=arch["ch2"], tdim=arch["tdim"])
    model = DiffusionModel(enc, den, NoiseSchedule.from_dict(meta["schedule"]))
    state = {k[len("model/"):]: t for k, t in tensors.items() if k.startswith("model/")}
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise DataError(f"checkpoint {path} does not match its architecture: {exc}") from exc
    rest = {k: t for k, t in tensors.items() if not k.startswith("model/")}
    return model, meta, rest


def _opt_tensors(state: dict) -> tuple[dict[str, torch.Tensor], dict]:
    tensors = {}
    for idx, st in state["state"].items():
        for k, t in st.items():
            tensors[f"opt/{idx}/{k}"] = torch.as_tensor(t)
    return tensors, {"param_groups": state["param_groups"]}


def _opt_state(tensors: dict[str, torch.Tensor], info: dict) -> dict:
    state: dict[int, dict] = {}
    for name, t in tensors.items():
        if name.startswith("opt/"):
            _, idx, k = name.split("/", 2)
            state.setdefault(int(idx), {})[k] = t.clone()
    return {"state": state, "param_groups": info["param_groups"]}


# -------------------------------------------------------------------- corpus


def run_corpus(cfg: RunConfig, out: Path) -> dict:
    root = out / "corpus"
    key = stage_hash(cfg, "corpus")
    if is_current(root, key):
        log.info("corpus up to date")
        return json.loads(_stamp_path(root).read_text())["result"]
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot write corpus to {root}: {exc}") from exc
    result = write_corpus(cfg.corpus, root)
    stamp(root, key, result=result)
    return result


def _require_corpus(out: Path) -> Path:
    root = out / "corpus"
    load_manifest(root)
    return root


# ------------------------------------------------------------------ pretrain


def run_pretrain(cfg: RunConfig, out: Path) -> dict:
    """Train (or resume) the base model, then run the single-concept gate."""
    root = _require_corpus(out)
    key = stage_hash(cfg, "corpus", "pretrain")
    path = out / "model.ckpt"
    pc = cfg.pretrain
    if is_current(path, key):
        log.info("pretrained model up to date")
    else:
        images, entries = load_split(root, "train")
        captions = [e["caption"] for e in entries]
        vocab = Vocabulary.default(list(PRETRAIN_CONCEPTS))
        model = build_model(vocab, pc)
        start, opt_state, curve = 0, None, []
        if path.exists():
            prev, meta, rest = load_model(path)
            if meta.get("stage_key") == key and meta.get("step", 0) < pc.steps:
                model = prev
                start = int(meta["step"])
                opt_state = _opt_state(rest, meta["optimizer"])
                curve = list(meta["curve"])
                log.info("resuming pretraining at step %d", start)

        def on_checkpoint(step: int, state: dict, so_far: list):
            ot, info = _opt_tensors(state)
            save_model(path, model, pc, ot, stage_key=key, step=step, optimizer=info,
                       curve=curve + so_far, config_hash=cfg.hash)

        model.train()
        new_curve, _ = pretrain(images, captions, model, pc, start, opt_state, on_checkpoint=on_checkpoint)
        curve = curve + new_curve
        save_model(path, model, pc, stage_key=key, step=pc.steps, curve=curve, config_hash=cfg.hash)
        _write_csv(out / "pretrain_curve.csv", ["step", "loss"], ((i, repr(v)) for i, v in enumerate(curve)))
        stamp(path, key)
    return run_gate(cfg, out)


def run_gate(cfg: RunConfig, out: Path) -> dict:
    path = out / "gate.json"
    key = stage_hash(cfg, "corpus", "pretrain", "sampling", "gate")
    if is_current(path, key):
        report = json.loads(path.read_text())
    else:
        model, _, _ = load_model(out / "model.ckpt")
        model.eval()
        per = {}
        for noun in PRETRAIN_CONCEPTS:
            imgs = _generate(model, f"a photo of a {noun}", cfg, cfg.gate.seeds, RngStream(cfg.seed, f"gate/{noun}"))
            per[noun] = coi_likelihood(imgs, noun)
            log.info("gate %s: %.3f", noun, per[noun])
        worst = min(per.values())
        report = {"config_hash": cfg.hash, "seeds": cfg.gate.seeds, "threshold": cfg.gate.min_likelihood,
                  "likelihood": per, "min": worst, "mean": float(np.mean(list(per.values()))),
                  "passed": worst >= cfg.gate.min_likelihood}
        path.write_text(json.dumps(report, indent=1, sort_keys=True))
        stamp(path, key)
    return report


def require_gate(out: Path) -> None:
    path = out / "gate.json"
    if not path.exists():
        raise DataError("pretraining gate has not been run; run `pretrain` first")
    report = json.loads(path.read_text())
    if not report["passed"]:
        raise GateError(f"pretrained model failed its gate: {report['likelihood']}")


def _generate(model, prompt, cfg: RunConfig, n: int, rng: RngStream, hook_factory=None, record=False):
    """n images for one prompt in batches of ``sampling.batch``; image k always
    comes from the same batch slot, so the result depends only on (config, n)."""
    out, records = [], []
    bs = cfg.sampling.batch
    for b, start in enumerate(range(0, n, bs)):
        m = min(bs, n - start)
        hook = hook_factory() if hook_factory else None
        imgs, rec = sample(prompt, model, cfg.sampling.guidance_scale, cfg.sampling.steps, rng.child(f"b{b}"),
                           hook=hook, batch=m, record=record)
        out.append(imgs)
        records.append(rec)
    images = torch.cat(out)
    return (images, records) if record else images


# ------------------------------------------------------------------- invert


def inversion_config(cfg: RunConfig, method: str, lam: float | None = None) -> InversionConfig:
    d = asdict(cfg.inversion)
    if lam is not None:
        d["lam"] = float(lam)
    ic = InversionConfig(**d)
    ic.validate()
    return ic


def run_invert(cfg: RunConfig, out: Path, method: str, lam: float | None = None, dest: Path | None = None) -> Path:
    if method not in METHODS:
        raise ConfigError(f"unknown inversion method {method!r}")
    ic = inversion_config(cfg, method, lam)
    dest = dest or out / "inversions" / method
    ckpt = dest.parent / f"{dest.name}.ckpt"
    key = stage_hash(cfg, "corpus", "pretrain", extra={"method": method, "inv": asdict(ic),
                                                      "concepts": cfg.evaluation.concepts})
    if is_current(ckpt, key):
        log.info("%s inversions up to date", dest.name)
        return ckpt
    root = _require_corpus(out)
    model, _, _ = load_model(out / "model.ckpt")
    model.eval()
    dest.mkdir(parents=True, exist_ok=True)
    summary = {}
    for name in cfg.evaluation.concepts:
        imgs, _ = load_split(root, f"user/{name}")
        res = invert(imgs, f"{name}*", SUPERCLASS[name], model, ic, anchored=(method == "semantic"))
        (dest / f"{name}.csv").write_text(res.log_csv())
        summary[name] = {"entropy": embedding_entropy(res.embedding),
                         "delta_support": list(res.delta.support) if res.delta else [],
                         "final_L_rec": res.log[-1]["L_rec"] if res.log else None}
    (dest / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    save_model(ckpt, model, cfg.pretrain, stage_key=key, method=method, inversion=asdict(ic), config_hash=cfg.hash)
    stamp(ckpt, key)
    return ckpt


# ------------------------------------------------------------------- layout


def run_layout_train(cfg: RunConfig, out: Path) -> dict:
    require_gate(out)
    root = out / "layout"
    key = stage_hash(cfg, "corpus", "pretrain", "sampling", "spatial")
    if is_current(root, key):
        return json.loads((root / "report.json").read_text())
    root.mkdir(parents=True, exist_ok=True)
    model, _, _ = load_model(out / "model.ckpt")
    model.eval()
    nouns = list(PRETRAIN_CONCEPTS)
    sc = cfg.spatial
    ds_path = root / "dataset.csv"
    ds_key = stage_hash(cfg, "corpus", "pretrain", "sampling", extra={"per_pair": sc.per_pair, "source": sc.source})
    if is_current(ds_path, ds_key):
        ds = LayoutDataset.from_csv(ds_path.read_text())
        ds.yield_report = json.loads((root / "yield.json").read_text())
    elif sc.source == "corpus":
        ds = corpus_layout_dataset(out / "corpus")
        ds_path.write_text(ds.to_csv())
        (root / "yield.json").write_text(json.dumps(ds.yield_report, indent=1, sort_keys=True))
        stamp(ds_path, ds_key)
    else:
        ds = build_layout_dataset(model, nouns, sc.per_pair, RngStream(cfg.seed, "layout-data"),
                                  cfg.sampling.steps, cfg.sampling.guidance_scale, min_yield=sc.min_yield)
        ds_path.write_text(ds.to_csv())
        (root / "yield.json").write_text(json.dumps(ds.yield_report, indent=1, sort_keys=True))
        stamp(ds_path, ds_key)
    table = model.encoder.table.detach()
    vecs = {n: table[model.encoder.vocab.id(n)] for n in nouns}
    res = train_layout_predictor(ds, vecs, sc.layout, sc.min_records)
    checkpoint.save(root / "layout.ckpt", {f"layout/{k}": v for k, v in res.predictor.state_dict().items()},
                    {"dim": int(table.shape[1]), "config_hash": cfg.hash})
    report = {"config_hash": cfg.hash, "records": len(ds.records), "yield": ds.yield_report["overall"],
              "val_iou": res.val_iou, "initial_loss": res.initial_loss, "final_loss": res.train_curve[-1],
              "train_pairs": [list(p) for p in res.train_pairs], "val_pairs": [list(p) for p in res.val_pairs]}
    (root / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    _write_csv(root / "train_curve.csv", ["epoch", "loss"], ((i, repr(v)) for i, v in enumerate(res.train_curve)))
    stamp(root, key)
    return report


def corpus_layout_dataset(root: Path) -> LayoutDataset:
    """Layout records straight from the ground truth of two-object training scenes."""
    entries = load_manifest(root)["splits"]["train"]
    ds = LayoutDataset()
    for e in entries:
        objs = e["objects"]
        if len(objs) != 2 or objs[0]["concept"] == objs[1]["concept"]:
            continue
        a, b = objs
        ds.records.append(LayoutRecord(a["concept"], b["concept"], BBox(*a["bbox"]), BBox(*b["bbox"]), 1.0, 1.0))
    ds.yield_report = {"overall": 1.0}
    return ds


def load_layout(out: Path) -> LayoutPredictor:
    path = out / "layout" / "layout.ckpt"
    if not path.exists():
        raise DataError("layout predictor missing; run `layout-train` before composing with --spatial on")
    tensors, meta = checkpoint.load(path)
    pred = LayoutPredictor(dim=meta["dim"])
    pred.load_state_dict({k[len("layout/"):]: v for k, v in tensors.items()})
    return pred.eval()


# ------------------------------------------------------------------ compose


def tasks(cfg: RunConfig, partners: int | None = None) -> list[tuple[str, str]]:
    n = cfg.evaluation.partners if partners is None else partners
    return [(c, p) for c in cfg.evaluation.concepts for p in partner_pool(c)[:n]]


def compose_prompt(concept_name: str, partner: str) -> str:
    return f"a {concept_name}* {SUPERCLASS[concept_name]} and a {partner}"


def run_compose(cfg: RunConfig, out: Path, method: str, spatial: bool, source: Path | None = None,
                dest: Path | None = None, task_list=None, seeds: int | None = None) -> Path:
    variant = method + ("+spatial" if spatial else "")
    source = source or out / "inversions" / f"{method}.ckpt"
    dest = dest or out / "compose" / variant
    seeds = cfg.evaluation.seeds if seeds is None else seeds
    task_list = tasks(cfg) if task_list is None else task_list
    if not source.exists():
        raise DataError(f"no {method} inversion at {source}; run `invert --method {method}` first")
    predictor = load_layout(out) if spatial else None
    inv_meta = checkpoint.load(source)[1]
    key = stage_hash(cfg, "sampling", extra={"inv": inv_meta.get("stage_key"), "spatial": asdict(cfg.spatial)
                     if spatial else None, "tasks": task_list, "seeds": seeds,
                     "layout": file_digest(out / "layout" / "layout.ckpt") if spatial else None})
    if is_current(dest, key):
        log.info("compose %s up to date", variant)
        return dest
    model, _, _ = load_model(source)
    model.eval()
    dest.mkdir(parents=True, exist_ok=True)
    for concept_name, partner in task_list:
        prompt = compose_prompt(concept_name, partner)
        factory = None
        if spatial:
            pm = prompt_masks(model, prompt, predictor)
            factory = lambda: make_guidance_hook(model, prompt, predictor, cfg.spatial.step_size,
                                                 cfg.spatial.inner_steps, masks=pm)
        rng = RngStream(cfg.seed, f"compose/{concept_name}/{partner}")
        imgs, recs = _generate(model, prompt, cfg, seeds, rng, factory, record=True)
        tdir = dest / f"{concept_name}__{partner}"
        tdir.mkdir(exist_ok=True)
        for k, img in enumerate(imgs):
            save_png(img, tdir / f"seed{k:03d}.png")
        hook_index = min(10, cfg.sampling.steps - 1)
        checkpoint.save(tdir / "attention.ckpt", {
            "final": torch.cat([r.canonical(len(r) - 1) for r in recs]).float(),
            "step10": torch.cat([r.canonical(hook_index) for r in recs]).float(),
        }, {"prompt": prompt, "timesteps": recs[0].timesteps, "step10_index": hook_index})
    stamp(dest, key)
    return dest


def load_images(tdir: Path) -> torch.Tensor:
    files = sorted(tdir.glob("seed*.png"))
    if not files:
        raise DataError(f"no images in {tdir}")
    return torch.stack([load_png(f) for f in files])


# -------------------------------------------------------------- attention probes


def run_probes(cfg: RunConfig, out: Path) -> Path:
    """Final-step attention of "a X and a partner" for X a TI pseudo-token, a
    semantic pseudo-token, or the superclass noun."""
    dest = out / "probes"
    sources = {m: out / "inversions" / f"{m}.ckpt" for m in METHODS}
    for m, p in sources.items():
        if not p.exists():
            raise DataError(f"attention probes need the {m} inversion ({p})")
    probe_tasks = tasks(cfg, 2)
    key = stage_hash(cfg, "sampling", "evaluation",
                     extra={m: checkpoint.load(p)[1].get("stage_key") for m, p in sources.items()})
    if is_current(dest, key):
        return dest
    base, _, _ = load_model(out / "model.ckpt")
    models = {"pretrained": base}
    for m, p in sources.items():
        models[m] = load_model(p)[0]
    for kind, model in models.items():
        model.eval()
        (dest / kind).mkdir(parents=True, exist_ok=True)
        for concept_name, partner in probe_tasks:
            x = SUPERCLASS[concept_name] if kind == "pretrained" else f"{concept_name}*"
            prompt = f"a {x} and a {partner}"
            rng = RngStream(cfg.seed, f"probe/{concept_name}/{partner}")
            _, recs = _generate(model, prompt, cfg, cfg.evaluation.attention_seeds, rng, record=True)
            maps = torch.cat([r.canonical(len(r) - 1) for r in recs]).float()
            checkpoint.save(dest / kind / f"{concept_name}__{partner}.ckpt", {"final": maps}, {"prompt": prompt})
    stamp(dest, key)
    return dest


def probe_gaps(out: Path) -> dict[str, float]:
    """Mean per-seed final-step dominance gap for each probe kind."""
    result = {}
    for kind in ("pretrained", *METHODS):
        gaps = []
        for f in sorted((out / "probes" / kind).glob("*.ckpt")):
            maps = checkpoint.load(f)[0]["final"].double()
            for s in range(maps.shape[0]):
                gaps.append(attention_similarity_series([maps[s:s + 1]], [[1], [4]])[1])
        result[kind] = float(np.mean(gaps)) if gaps else float("nan")
    return result


# ------------------------------------------------------------------ evaluate


def _user_reference(out: Path, name: str):
    imgs, entries = load_split(out / "corpus", f"user/{name}")
    boxes = [BBox(*e["objects"][0]["bbox"]) for e in entries]
    return imgs, boxes


def evaluate_dir(cfg: RunConfig, out: Path, compose_dir: Path, method: str, task_list) -> list[TaskRow]:
    rows = []
    missing = [f"{compose_dir}/{c}__{p}" for c, p in task_list if not (compose_dir / f"{c}__{p}").is_dir()]
    if missing:
        raise DataError("missing composed image sets:\n  " + "\n  ".join(missing))
    for c, p in task_list:
        imgs = load_images(compose_dir / f"{c}__{p}")
        uimgs, uboxes = _user_reference(out, c)
        rows.append(TaskRow(method, c, p,
                            text_alignment_proxy(imgs, [c, p]),
                            coi_likelihood(imgs, c),
                            coi_likelihood(imgs, p),
                            image_alignment(imgs, uimgs, uboxes, c)))
    return rows


def run_evaluate(cfg: RunConfig, out: Path) -> MetricReport:
    task_list = tasks(cfg)
    report = MetricReport(config_hash=cfg.hash, seeds=list(range(cfg.evaluation.seeds)))
    present = [v for v in VARIANTS if (out / "compose" / v).is_dir()]
    for v in present:
        report.rows.extend(evaluate_dir(cfg, out, out / "compose" / v, v, task_list))
    rdir = out / "reports"
    rdir.mkdir(parents=True, exist_ok=True)
    (rdir / "metrics.csv").write_text(report.to_csv())
    (rdir / "summary.json").write_text(report.to_json())
    extra = {}
    if all((out / "inversions" / f"{m}.ckpt").exists() for m in METHODS):
        extra["entropy"] = {m: json.loads((out / "inversions" / m / "summary.json").read_text()) for m in METHODS}
        if cfg.evaluation.attention_seeds > 0:
            run_probes(cfg, out)
            extra["attention_gap"] = probe_gaps(out)
    (rdir / "diagnostics.json").write_text(json.dumps(extra, indent=1, sort_keys=True))
    return report


# -------------------------------------------------------------------- sweep


def run_sweep(cfg: RunConfig, out: Path, lambdas=None) -> list[dict]:
    lambdas = list(cfg.sweep.lambdas if lambdas is None else lambdas)
    task_list = tasks(cfg, cfg.sweep.partners)
    rows = []
    for lam in lambdas:
        tag = f"lambda_{lam:g}"
        ldir = out / "sweep" / tag
        ckpt = run_invert(cfg, out, "semantic", lam=lam, dest=ldir / "inversions")
        cdir = run_compose(cfg, out, "semantic", False, source=ckpt, dest=ldir / "compose",
                           task_list=task_list, seeds=cfg.sweep.seeds)
        trs = evaluate_dir(cfg, out, cdir, f"lambda={lam:g}", task_list)
        rep = MetricReport(trs, cfg.hash, list(range(cfg.sweep.seeds)))
        (ldir / "metrics.csv").write_text(rep.to_csv())
        rows.append({"lambda": lam,
                     "text_align_proxy": float(np.mean([r.text_align_proxy for r in trs])),
                     "image_align": float(np.mean([r.image_align for r in trs])),
                     "coi_likelihood_a": float(np.mean([r.coi_likelihood_a for r in trs])),
                     "coi_likelihood_b": float(np.mean([r.coi_likelihood_b for r in trs]))})
    buf = io.StringIO()
    buf.write("# " + " | ".join(f"{k}: {v}" for k, v in SUBSTITUTIONS.items()) + "\n")
    w = csv.DictWriter(buf, ["lambda", "text_align_proxy", "image_align", "coi_likelihood_a", "coi_likelihood_b"],
                       lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.6f}" if k != "lambda" else f"{v:g}") for k, v in r.items()})
    (out / "sweep").mkdir(parents=True, exist_ok=True)
    (out / "sweep" / "summary.csv").write_text(buf.getvalue())
    return rows


# ----------------------------------------------------------- spatial check


def in_mask_comparison(cfg: RunConfig, out: Path, prompt: str = "a redcircle and a bluesquare",
                       seeds: int = 50) -> dict:
    """Mean in-mask attention fraction at the last hooked step, with and without the hook."""
    model, _, _ = load_model(out / "model.ckpt")
    model.eval()
    predictor = load_layout(out)
    pm = prompt_masks(model, prompt, predictor)
    idx = min(10, cfg.sampling.steps - 1)
    res = {}
    for label, with_hook in (("plain", False), ("guided", True)):
        factory = (lambda: make_guidance_hook(model, prompt, predictor, cfg.spatial.step_size,
                                              cfg.spatial.inner_steps, masks=pm)) if with_hook else None
        _, recs = _generate(model, prompt, cfg, seeds, RngStream(cfg.seed, "inmask"), factory, record=True)
        fr = torch.cat([in_mask_fraction(r.canonical(idx), pm) for r in recs])
        res[label] = float(fr.mean())
    return res
