"""Command line entry point: ``cbv <subcommand> [--config FILE] [--seed N] --out DIR``.

A config file is a JSON object; each subcommand reads the section named
after it (for example ``{"poison": {"tau": 0.3}}``), so one file can drive a
whole pipeline. Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import hashlib
import sys
from dataclasses import asdict
from pathlib import Path

import torch

from ..data import make_shapes, save_gray_png, save_mask_png
from ..diffusion import ScoreTrainConfig, build_schedule, default_schedule, train_score
from ..encoders import TrainConfig, load_model, read_meta, save_model, train_classifier, \
    train_dual_encoder
from ..errors import CbvError
from ..saliency import saliency_mask
from ..trigger import UapConfig, alignment_report, apply_trigger, generate_uap, load_trigger, \
    noise_trigger, save_trigger
from .config import build, provenance, read_config, write_json
from .manifest import load_manifest, write_dataset
from .metrics import eval_asr, eval_clean, eval_quality, strip_entropy
from .pipeline import PoisonConfig, build_poisoned_dataset
from .plan import plan_poison, save_plan
from .victim import VictimConfig, train_victim

# toy attack profile: the trigger budget is larger than the generic
# adversarial default so a tiny victim can pick it up from a few poisons
ATTACK_UAP = {"rho": 48 / 255}

GEN_DATA_DEFAULTS = {"n_train": 500, "n_test": 100, "num_classes": 4}
SCHEDULE_DEFAULTS = {"T": 50, "beta_start": None, "beta_end": None}


def _section(args) -> dict:
    return dict(read_config(args.config).get(args.command, {}))


def _seed(args, default: int = 0) -> int:
    return default if args.seed is None else int(args.seed)


def _split_keys(cfg: dict, keys) -> dict:
    return {k: cfg.pop(k) for k in list(cfg) if k in keys}


def _file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(args) -> None:
    cfg = {**GEN_DATA_DEFAULTS, **_section(args)}
    seed = _seed(args)
    train = make_shapes(int(cfg["n_train"]), seed, int(cfg["num_classes"]))
    # test images come from a disjoint random stream
    test = make_shapes(int(cfg["n_test"]), seed + 1_000_003, int(cfg["num_classes"]))
    out = _out(args)
    m = write_dataset(out, train, test)
    write_json(out / "report.json", {"n_records": len(m.records), "classes": m.classes,
                                     "config": cfg, "provenance": provenance(seed, cfg)})


def cmd_train_encoders(args) -> None:
    cfg = _section(args)
    seed = _seed(args)
    enc_cfg = build(TrainConfig, cfg.get("encoder", {}), seed=seed)
    clf_cfg = build(TrainConfig, cfg.get("classifier", {"epochs": 10}), seed=seed)
    data = load_manifest(args.data).load(split="train")
    out = _out(args)
    enc = train_dual_encoder(data, enc_cfg, len(data.class_names))
    clf = train_classifier(data, clf_cfg, len(data.class_names))
    save_model(out / "encoder.cbvw", enc)
    save_model(out / "classifier.cbvw", clf)
    eff = {"encoder": asdict(enc_cfg), "classifier": asdict(clf_cfg)}
    write_json(out / "encoders_report.json", {"encoder": enc.report, "classifier": clf.report,
                                              "config": eff, "provenance": provenance(seed, eff)})


def _schedule(meta: dict):
    T = int(meta.get("T", 50))
    if meta.get("beta_start") is None:
        return default_schedule(T)
    return build_schedule(T, float(meta["beta_start"]), float(meta["beta_end"]))


def cmd_train_diffusion(args) -> None:
    cfg = {**SCHEDULE_DEFAULTS, **_section(args)}
    sched_cfg = _split_keys(cfg, SCHEDULE_DEFAULTS)
    seed = _seed(args)
    score_cfg = build(ScoreTrainConfig, {"epochs": 12, **cfg}, seed=seed)
    data = load_manifest(args.data).load(split="train")
    schedule = _schedule(sched_cfg)
    net = train_score(data.images, schedule, score_cfg)
    out = _out(args)
    save_model(out / "scorenet.cbvw", net, {"schedule": sched_cfg})
    eff = {"schedule": sched_cfg, "train": asdict(score_cfg)}
    write_json(out / "diffusion_report.json", {"report": net.report, "config": eff,
                                               "provenance": provenance(seed, eff)})


def cmd_gen_uap(args) -> None:
    cfg = {**ATTACK_UAP, **_section(args)}
    kind = cfg.pop("kind", "uap")
    max_pairs = int(cfg.pop("max_pairs", 400))
    seed = _seed(args)
    uap_cfg = build(UapConfig, cfg, seed=seed)
    data = load_manifest(args.data).load(split="train")
    data = data.subset(torch.arange(min(max_pairs, len(data))))
    enc = load_model(args.encoder)
    pairs = (data.images, data.labels)
    if kind == "noise":
        trig = noise_trigger(data.images.shape[1:], uap_cfg.rho, seed, uap_cfg.norm)
    elif kind == "uap":
        trig = generate_uap(enc, pairs, uap_cfg)
    else:
        raise CbvError(f"unknown trigger kind {kind!r}")
    out = _out(args)
    save_trigger(out / "uap.cbvw", trig)
    rep = alignment_report(enc, pairs, trig)
    eff = {**asdict(uap_cfg), "kind": kind, "max_pairs": max_pairs}
    write_json(out / "uap_report.json", {
        "mean_alignment_without": rep["mean_without"], "mean_alignment_with": rep["mean_with"],
        "sha256": trig.digest(), "config": eff, "provenance": provenance(seed, eff)})


def cmd_gen_mask(args) -> None:
    cfg = _section(args)
    tau = float(cfg.get("tau", args.tau))
    m = load_manifest(args.data)
    label = None if args.label is None else m.label_id(args.label)
    recs = m.select(args.split, label)[: args.limit]
    clf = load_model(args.classifier)
    out = _out(args)
    rows = []
    for r in recs:
        x = m.load([r]).images[0]
        mask, heat = saliency_mask(clf, x, r.label, tau)
        save_mask_png(out / "masks" / f"{r.id:06d}.png", mask.mask)
        save_gray_png(out / "heatmaps" / f"{r.id:06d}.png", heat.values)
        rows.append({"id": r.id, "label": r.label, "mask_pixels": mask.count})
    eff = {"tau": tau, "split": args.split, "label": label, "limit": args.limit}
    write_json(out / "masks_report.json", {"records": rows, "config": eff,
                                           "provenance": provenance(_seed(args), eff)})


def cmd_poison(args) -> None:
    cfg = _section(args)
    source = cfg.pop("source", "any" if args.poison_any_class else "target")
    seed = _seed(args)
    pcfg = build(PoisonConfig, cfg)
    m = load_manifest(args.data)
    models = Path(args.models)
    enc = load_model(models / "encoder.cbvw")
    clf = load_model(models / "classifier.cbvw")
    net = load_model(models / "scorenet.cbvw")
    schedule = _schedule(read_meta(models / "scorenet.cbvw").get("schedule", {}))
    trig = load_trigger(args.trigger)
    plan = plan_poison(m, args.original, args.target, args.rate, seed, source, tau=pcfg.tau,
                       trigger_ref=trig.digest(), sampler=asdict(pcfg.sampler(seed)))
    out = _out(args)
    _, entries = build_poisoned_dataset(m, plan, trig, enc, clf, net, schedule, pcfg, out)
    save_plan(out / "plan.json", plan)
    eff = {**asdict(pcfg), "source": source, "rate": args.rate, "original": plan.original,
           "target": plan.target, "trigger": trig.digest()}
    write_json(out / "poison_report.json", {"n_poisoned": len(entries), "records": entries,
                                            "config": eff, "provenance": provenance(seed, eff)})


def cmd_train_victim(args) -> None:
    cfg = _section(args)
    seed = _seed(args)
    vcfg = build(VictimConfig, {"epochs": 40, **cfg}, seed=seed)
    m = load_manifest(args.data)
    victim = train_victim(m.load(split="train"), vcfg, len(m.classes))
    out = _out(args)
    save_model(out / "victim.cbvw", victim)
    write_json(out / "victim_report.json", {"report": victim.report, "config": asdict(vcfg),
                                            "provenance": provenance(seed, asdict(vcfg))})


def cmd_evaluate(args) -> None:
    victim = load_model(args.victim)
    m = load_manifest(args.data)
    o, t = m.label_id(args.original), m.label_id(args.target)
    test = m.load(split="test")
    trig = load_trigger(args.trigger)
    report = {"asr": eval_asr(victim, test, trig, o, t), "clean": eval_clean(victim, test)}
    if args.clean_data:
        # image quality of every training record whose bytes differ
        clean = load_manifest(args.clean_data)
        base = {r.id: r for r in clean.records}
        changed = [r for r in m.select("train")
                   if r.id in base and clean.image_path(base[r.id]).read_bytes()
                   != m.image_path(r).read_bytes()]
        if changed:
            enc = load_model(args.encoder) if args.encoder else None
            q = eval_quality(clean.load([base[r.id] for r in changed]).images,
                             m.load(changed).images, enc)
            q["ids"] = [r.id for r in changed]
            report["quality"] = q
    eff = {"original": o, "target": t, "trigger": trig.digest(), "victim": _file_sha256(args.victim)}
    report["provenance"] = provenance(_seed(args), eff)
    write_json(_out(args) / "metrics.json", report)


def cmd_strip(args) -> None:
    cfg = _section(args)
    n = int(cfg.get("n_overlays", args.n_overlays))
    bins = int(cfg.get("bins", 10))
    seed = _seed(args)
    victim = load_model(args.victim)
    m = load_manifest(args.data)
    o = m.label_id(args.original)
    test = m.load(split="test")
    trig = load_trigger(args.trigger)
    probes = test.images[test.labels == o]
    donors = m.load(split="train").images
    report = {"clean": strip_entropy(victim, probes, donors, n, seed, bins),
              "triggered": strip_entropy(victim, apply_trigger(probes, trig), donors, n, seed, bins)}
    eff = {"n_overlays": n, "bins": bins, "original": o, "trigger": trig.digest()}
    report["provenance"] = provenance(seed, eff)
    write_json(_out(args) / "strip.json", report)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cbv", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int, help="random seed (default 0)")
        sp.add_argument("--out", required=True, help="output directory")
        sp.set_defaults(func=fn)
        return sp

    add("gen-data", cmd_gen_data, "emit the synthetic shapes dataset")
    sp = add("train-encoders", cmd_train_encoders, "train the surrogate dual encoder and classifier")
    sp.add_argument("--data", required=True)
    sp = add("train-diffusion", cmd_train_diffusion, "train the noise-prediction network")
    sp.add_argument("--data", required=True)
    sp = add("gen-uap", cmd_gen_uap, "optimize the universal trigger")
    sp.add_argument("--data", required=True)
    sp.add_argument("--encoder", required=True)
    sp = add("gen-mask", cmd_gen_mask, "export Grad-CAM heatmaps and masks")
    sp.add_argument("--data", required=True)
    sp.add_argument("--classifier", required=True)
    sp.add_argument("--tau", type=float, default=0.25)
    sp.add_argument("--split", choices=("train", "test"), default="train")
    sp.add_argument("--label")
    sp.add_argument("--limit", type=int, default=16)
    sp = add("poison", cmd_poison, "build the poisoned dataset")
    sp.add_argument("--data", required=True)
    sp.add_argument("--models", required=True, help="directory with encoder/classifier/scorenet")
    sp.add_argument("--trigger", required=True)
    sp.add_argument("--original", default="0")
    sp.add_argument("--target", default="1")
    sp.add_argument("--rate", type=float, default=0.05)
    sp.add_argument("--poison-any-class", action="store_true",
                    help="draw poisoned records from every class instead of the target class")
    sp = add("train-victim", cmd_train_victim, "train the toy victim classifier")
    sp.add_argument("--data", required=True)
    sp = add("evaluate", cmd_evaluate, "attack success, clean accuracy and image quality")
    sp.add_argument("--victim", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--trigger", required=True)
    sp.add_argument("--original", default="0")
    sp.add_argument("--target", default="1")
    sp.add_argument("--clean-data", help="clean manifest, enables image-quality metrics")
    sp.add_argument("--encoder", help="encoder for the feature-distance metric")
    sp = add("strip", cmd_strip, "STRIP entropy of clean and triggered probes")
    sp.add_argument("--victim", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--trigger", required=True)
    sp.add_argument("--original", default="0")
    sp.add_argument("--n-overlays", type=int, default=16)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)   # exits with status 2 on usage errors
    # a single intra-op thread keeps every float reduction in a fixed order
    torch.set_num_threads(1)
    try:
        args.func(args)
    except (CbvError, OSError, ValueError, KeyError) as e:
        print(f"cbv {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
