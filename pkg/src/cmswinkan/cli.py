"""Command-line entry point: ``cmswinkan <subcommand> ...``.

Settings come from an optional ``--config`` key=value file and are overridden
by explicit flags. Every subcommand that writes a report appends a
reproducibility stanza (seed, config echo, library versions).
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np

from .config import Config, ConfigError

EXIT_USAGE = 2


class UsageError(Exception):
    pass


def _need_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


def _versions() -> str:
    import numba
    import PIL
    import scipy

    from . import __version__, kernels

    return (f"python={platform.python_version()} numpy={np.__version__} scipy={scipy.__version__} "
            f"numba={numba.__version__} pillow={PIL.__version__} cmswinkan={__version__} "
            f"kernels={kernels.backend()}")


def _stanza(cfg: Config, seed: int, command: str) -> str:
    lines = ["", "[reproducibility]", f"command={command}", f"seed={seed}", f"versions={_versions()}", "config:"]
    lines += [f"  {line}" for line in cfg.echo().splitlines()]
    return "\n".join(lines) + "\n"


def _write_report(path, body: str, cfg: Config, seed: int, command: str) -> str:
    text = body.rstrip("\n") + "\n" + _stanza(cfg, seed, command)
    if path:
        Path(path).write_text(text)
    return text


def _load_config(args) -> Config:
    if getattr(args, "config", None):
        _need_file(args.config, "config file")
        return Config.load(args.config)
    return Config()


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_tile(args, cfg: Config) -> int:
    from .wsi import FilterParams, load_slide, run_pipeline

    cfg = cfg.override(tile__window=args.window, tile__stride=args.stride, tile__workers=args.workers,
                       tile__white_thresh=args.white_thresh, tile__white_frac=args.white_frac,
                       tile__red_frac=args.red_frac)
    slide = load_slide(_need_file(args.slide, "slide"), args.slide_id)
    params = FilterParams(
        white_thresh=cfg.int("tile.white_thresh", 245),
        white_frac=cfg.float("tile.white_frac", 0.5),
        red_frac=cfg.float("tile.red_frac", 0.5),
    )
    rows = run_pipeline(slide, args.out, cfg.int("tile.window", 512), cfg.int("tile.stride", 512), params,
                        cfg.int("tile.workers", 1))
    kept = sum(r.kept for r in rows)
    reasons = {k: sum(r.reason == k for r in rows) for k in ("white", "red")}
    print(f"{slide.slide_id}: {len(rows)} tiles, {kept} kept, {reasons['white']} white, {reasons['red']} red")
    return 0


def cmd_gen_data(args, cfg: Config) -> int:
    from .data import SyntheticCorpusSpec, gen_patch_corpus, gen_synthetic_slide

    cfg = cfg.override(data__images_per_class=args.images_per_class, data__seed=args.seed,
                       data__num_classes=args.num_classes)
    seed = cfg.int("data.seed", 0)
    spec = SyntheticCorpusSpec(num_classes=cfg.int("data.num_classes", 4),
                               images_per_class=cfg.int("data.images_per_class", 500))
    if args.out:
        corpus = gen_patch_corpus(spec, seed)
        corpus.save(args.out)
        print(f"wrote {len(corpus.y_train)} train / {len(corpus.y_test)} test images to {args.out}")
    if args.slide:
        from PIL import Image

        comp = {}
        for item in args.composition.split(","):
            key, frac = item.split("=")
            comp[key if key in ("blank", "blood") else tuple(int(v) for v in key.split(":"))] = float(frac)
        pixels, truth = gen_synthetic_slide(comp, args.label, (args.grid, args.grid), seed, spec)
        Image.fromarray(pixels).save(args.slide)
        truth_path = Path(args.slide).with_suffix(".truth.json")
        truth_path.write_text(json.dumps({"label": truth.label, "tile": truth.tile, "grid": list(truth.grid_shape),
                                          "kinds": [k if isinstance(k, str) else list(k) for k in truth.kinds]}))
        print(f"wrote slide {args.slide} ({pixels.shape[1]}x{pixels.shape[0]}) and {truth_path}")
    if not args.out and not args.slide:
        raise UsageError("gen-data needs --out and/or --slide")
    return 0


def _model_config(cfg: Config):
    from .model import make_config

    over = {}
    if cfg.int("model.K") is not None:
        over["K"] = cfg.int("model.K")
    return make_config(cfg.str("model.variant", "toy"), cfg.int("model.num_classes", 4),
                       use_cmsa=cfg.bool("model.use_cmsa", True), seed=cfg.int("model.seed", 0), **over)


def cmd_train(args, cfg: Config) -> int:
    from .data import Corpus
    from .model import CMSwinKAN, save_checkpoint
    from .train import TrainConfig, train

    cfg = cfg.override(model__variant=args.variant, model__seed=args.seed, train__seed=args.seed,
                       train__epochs=args.epochs, train__lr=args.lr, train__batch_size=args.batch_size,
                       model__use_cmsa=False if args.no_cmsa else None)
    corpus = Corpus.load(_need_file(args.data, "corpus"))
    cfg = cfg.override(model__num_classes=corpus.num_classes)
    tc = TrainConfig(epochs=cfg.int("train.epochs", 15), batch_size=cfg.int("train.batch_size", 64),
                     lr=cfg.float("train.lr", 1e-3), weight_decay=cfg.float("train.weight_decay", 0.05),
                     warmup_frac=cfg.float("train.warmup_frac", 0.05), horizon=cfg.int("train.horizon"),
                     seed=cfg.int("train.seed", 0))
    model = CMSwinKAN(_model_config(cfg))
    hist = train(model, corpus, tc)
    save_checkpoint(model, args.out)
    body = ["[training]", f"parameters={model.num_parameters()}"]
    for e, (loss, acc, lr) in enumerate(zip(hist.train_loss, hist.test_acc, hist.lr), 1):
        body.append(f"epoch={e} train_loss={loss:.6f} test_acc={acc:.4f} lr={lr:.6g}")
    body += ["", "[final test metrics]", hist.reports[-1].to_text()]
    text = _write_report(args.report, "\n".join(body), cfg, tc.seed, "train")
    print(text if not args.report else f"checkpoint {args.out}; report {args.report}")
    return 0


def _load_model(path):
    from .model import CheckpointError, load_checkpoint

    _need_file(path, "checkpoint")
    try:
        return load_checkpoint(path)
    except CheckpointError as e:
        raise UsageError(str(e)) from e


def cmd_eval(args, cfg: Config) -> int:
    from .data import Corpus
    from .model import build_model
    from .train import evaluate

    model = _load_model(args.model)
    corpus = Corpus.load(_need_file(args.data, "corpus"))
    rep = evaluate(model, corpus.x_test, corpus.y_test)
    body = ["[test metrics]", rep.to_text(), "", "[parameter counts]",
            f"evaluated ({model.cfg.variant})={model.num_parameters()}"]
    for variant in ("micro", "tiny"):
        body.append(f"{variant}={build_model(variant, 5).num_parameters()}")
    cfg = cfg.override(model__checkpoint=args.model, data__corpus=args.data)
    print(_write_report(args.report, "\n".join(body), cfg, model.cfg.seed, "eval"))
    return 0


def cmd_train_svm(args, cfg: Config) -> int:
    from .data import Corpus
    from .pipeline import score_images
    from .voting import svm_train

    cfg = cfg.override(svm__lam=args.lam, svm__epochs=args.epochs, svm__seed=args.seed)
    model = _load_model(args.model)
    corpus = Corpus.load(_need_file(args.data, "corpus"))
    feats, _ = score_images(model, corpus.x_train)
    svm = svm_train(feats, corpus.t_train, cfg.float("svm.lam", 1e-3), cfg.int("svm.epochs", 30),
                    cfg.int("svm.seed", 0))
    svm.save(args.out)
    print(f"tissue SVM training accuracy {svm.train_accuracy:.4f}; wrote {args.out}")
    return 0


def cmd_predict_wsi(args, cfg: Config) -> int:
    from .pipeline import find_tiles, load_tiles, patch_records
    from .voting import LinearSvm, VoteParams, group_by_slide, hard_vote, soft_vote, write_records

    cfg = cfg.override(vote__alpha=args.alpha, vote__beta=args.beta, vote__gamma=args.gamma)
    model = _load_model(args.model)
    svm = LinearSvm.load(_need_file(args.svm, "SVM checkpoint"))
    src = Path(args.tiles)
    if not src.exists():
        raise UsageError(f"tile source not found: {src}")
    entries = find_tiles(src)
    if not entries:
        raise UsageError(f"no kept tiles under {src}")
    params = VoteParams(cfg.float("vote.alpha", 1.0), cfg.float("vote.beta", 8.0), cfg.float("vote.gamma", 1.0))
    records = []
    for s in range(0, len(entries), 256):
        chunk = entries[s : s + 256]
        records += patch_records(model, svm, [e[0] for e in chunk], [e[1] for e in chunk], [e[2] for e in chunk],
                                 load_tiles(chunk))
    if args.records:
        write_records(args.records, records)
    body = ["[slide verdicts]"]
    for sid, recs in sorted(group_by_slide(records).items()):
        body.append((hard_vote(recs) if args.hard else soft_vote(recs, params)).to_text())
    print(_write_report(args.report, "\n".join(body), cfg, model.cfg.seed, "predict-wsi"))
    return 0


def cmd_gradcheck(args, cfg: Config) -> int:
    from .gradcheck import DEFAULT_STEP, DEFAULT_TOL, check_model
    from .model import CMSwinKAN

    cfg = cfg.override(gradcheck__samples=args.samples, gradcheck__seed=args.seed)
    seed = cfg.int("gradcheck.seed", 0)
    model = CMSwinKAN(_model_config(cfg))
    rng = np.random.default_rng(seed)
    size = model.cfg.backbone.img_size
    batch = cfg.int("gradcheck.batch", 2)
    images = rng.normal(size=(batch, 3, size, size))
    labels = rng.integers(0, model.cfg.num_classes, batch)
    tol = cfg.float("gradcheck.tol", DEFAULT_TOL)
    res = check_model(model, images, labels, num_samples=cfg.int("gradcheck.samples", 200),
                      step=cfg.float("gradcheck.step", DEFAULT_STEP), seed=seed, tol=tol)
    body = [f"checked {len(res.entries)} of {model.num_parameters()} parameters",
            f"max relative error {res.max_rel_error:.3e} (tolerance {tol:g})"]
    body += [f"  {e.name}{list(e.index)} analytic={e.analytic:.6e} numeric={e.numeric:.6e} rel={e.rel_error:.2e}"
             for e in res.worst(5)]
    print(_write_report(args.report, "\n".join(body), cfg, seed, "gradcheck"))
    return 0 if res.passed else 1


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cmswinkan", description="KAN-Swin classifier with multi-scale fusion and slide voting")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.add_argument("--config", help="key=value config file; explicit flags win")
        sp.add_argument("--report", help="write the report here as well as printing it")
        sp.set_defaults(fn=fn)
        return sp

    sp = add("tile", cmd_tile, "tile a slide raster, filter blank/blood tiles, write PNGs and a manifest")
    sp.add_argument("--input", "--slide", dest="slide", required=True, help="RGB slide raster (PNG/TIFF/JPEG)")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--slide-id", help="identifier used in tile names (default: file stem)")
    sp.add_argument("--window", type=int)
    sp.add_argument("--stride", type=int)
    sp.add_argument("--workers", type=int)
    sp.add_argument("--white-thresh", type=int, help="per-channel minimum counted as white (default 245)")
    sp.add_argument("--white-frac", type=float, help="reject when the white fraction exceeds this (default 0.5)")
    sp.add_argument("--red-frac", type=float, help="reject when the red fraction exceeds this (default 0.5)")

    sp = add("gen-data", cmd_gen_data, "generate the synthetic patch corpus and/or a synthetic slide")
    sp.add_argument("--out", help="corpus .npz path")
    sp.add_argument("--images-per-class", type=int)
    sp.add_argument("--num-classes", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--slide", help="also write a synthetic slide PNG here")
    sp.add_argument("--composition", default="0:0=0.75,blank=0.25",
                    help="comma list of cls:tissue=frac, blank=frac, blood=frac")
    sp.add_argument("--label", type=int, default=0)
    sp.add_argument("--grid", type=int, default=4, help="slide is grid x grid tiles")

    sp = add("train", cmd_train, "train a model on a corpus and write a checkpoint")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--variant", help="toy | mini | micro | tiny (default toy)")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--no-cmsa", action="store_true", help="ablate the fusion branch (stage-4 features only)")

    sp = add("eval", cmd_eval, "evaluate a checkpoint on a corpus's test split")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)

    sp = add("train-svm", cmd_train_svm, "fit the tissue-component SVM on model features")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--lam", type=float)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--seed", type=int)

    sp = add("predict-wsi", cmd_predict_wsi, "classify slides by voting over their kept tiles")
    sp.add_argument("--model", required=True)
    sp.add_argument("--svm", required=True)
    sp.add_argument("--tiles", required=True, help="tile directory or manifest")
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--beta", type=float)
    sp.add_argument("--gamma", type=float)
    sp.add_argument("--hard", action="store_true", help="majority vote instead of weighted soft vote")
    sp.add_argument("--records", help="also write per-patch records here")

    sp = add("gradcheck", cmd_gradcheck, "finite-difference gradient check of a model configuration")
    sp.add_argument("--samples", type=int)
    sp.add_argument("--seed", type=int)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args, _load_config(args))
    except (UsageError, ConfigError, FileNotFoundError) as e:
        print(f"cmswinkan {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
