"""``capforge`` command-line entry point."""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .annotation import (
    BoundingBox, FeatureFileError, build_annotation_set, dump_features,
    load_feature_file, synthetic_extractor,
)
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .decoder import DecoderDims, DecoderParams
from .decoding import DecodeConfig, beam_search_hypothesis, greedy_search, strip_end
from .fileio import (
    format_captions, group_references, read_candidate_captions, read_captions,
    write_atomic,
)
from .metrics import EvalItem, evaluate, format_results
from .training import (
    format_loss_history, grad_check_report, load_config, random_problem, train,
)
from .vocab import build_vocab, decode_ids, dump_vocab, encode, load_vocab

SEED_ENV = "CAPFORGE_SEED"
GRADCHECK_TOL = 1e-4


class CommandError(Exception):
    """Operational failure reported to the user with exit status 1."""


def parse_kv(text: str, required=(), optional=()) -> dict[str, int]:
    """Parse ``"V=12,m=5"`` into ints. Keys outside ``required`` and ``optional`` are errors."""
    out = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        key, sep, value = part.partition("=")
        if not sep:
            raise CommandError(f"bad dimension spec {part!r}; expected key=value")
        if key not in required and key not in optional:
            raise CommandError(f"unknown dimension {key!r}")
        try:
            out[key] = int(value)
        except ValueError:
            raise CommandError(f"dimension {key} must be an integer, got {value!r}") from None
    missing = [k for k in required if k not in out]
    if missing:
        raise CommandError(f"missing dimensions {missing}")
    return out


def write_manifest(out_path, command: str, config: dict, inputs: dict, seed) -> None:
    manifest = {
        "command": command,
        "config": config,
        "inputs": {k: os.fspath(v) for k, v in inputs.items() if v is not None},
        "output": os.fspath(out_path),
        "seed": seed,
        "version": __version__,
    }
    write_atomic(f"{out_path}.manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def header(kind: str, **fields) -> str:
    extra = "".join(f" {k}={v}" for k, v in fields.items())
    return f"# capforge-{kind} v1{extra}"


# -- subcommands ------------------------------------------------------------

def cmd_build_vocab(args) -> None:
    write_manifest(args.out, "build-vocab", {"min_count": args.min_count},
                   {"captions": args.captions}, None)
    vocab = build_vocab(read_captions(args.captions), args.min_count)
    write_atomic(args.out, dump_vocab(vocab))
    print(f"vocabulary: {len(vocab)} entries")


def _load_image(directory: Path, image_id: str) -> np.ndarray:
    npy = directory / f"{image_id}.npy"
    if npy.exists():
        return np.load(npy)
    for ext in (".png", ".jpg", ".jpeg"):
        path = directory / f"{image_id}{ext}"
        if path.exists():
            from PIL import Image
            with Image.open(path) as im:
                return np.asarray(im.convert("RGB"), dtype=np.float64)
    raise CommandError(f"no image file for {image_id} in {directory}")


def read_boxes(path) -> dict[str, list[BoundingBox]]:
    boxes: dict[str, list[BoundingBox]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if len(parts) != 6:
                raise CommandError(f"{path}:{lineno}: expected 'image_id x y w h score'")
            try:
                box = BoundingBox(*(float(v) for v in parts[1:]))
            except ValueError:
                raise CommandError(f"{path}:{lineno}: non-numeric box field") from None
            boxes.setdefault(parts[0], []).append(box)
    return boxes


def cmd_featurize(args) -> None:
    config = {"top_n": args.top_n, "feature_dim": args.feature_dim, "mean_pixel": args.mean_pixel}
    write_manifest(args.out, "featurize", config,
                   {"images": args.images, "boxes": args.boxes}, args.synthetic_seed)
    obj = synthetic_extractor(args.synthetic_seed, args.feature_dim)
    loc = synthetic_extractor(args.synthetic_seed + 1, args.feature_dim)
    mean_values = [float(v) for v in args.mean_pixel.split(",")]
    features = {}
    for image_id, boxes in sorted(read_boxes(args.boxes).items()):
        image = _load_image(Path(args.images), image_id)
        channels = image.shape[2] if image.ndim == 3 else 1
        mean = mean_values * channels if len(mean_values) == 1 else mean_values
        features[image_id] = build_annotation_set(image, boxes, args.top_n, obj, loc, mean)
    write_atomic(args.out, dump_features(features))
    print(f"featurized {len(features)} images")


def _training_pairs(features, records, vocab, max_len):
    pairs = []
    for rec in records:
        if rec.image_id in features:
            pairs.append((features[rec.image_id], encode(rec.tokens, vocab, max_len)))
    if not pairs:
        raise CommandError("no caption matches an image in the feature file")
    return pairs


def cmd_train(args) -> None:
    config = load_config(args.config)
    if os.environ.get(SEED_ENV):
        try:
            config = type(config)(**{**config.__dict__, "seed": int(os.environ[SEED_ENV])})
        except ValueError:
            raise CommandError(f"{SEED_ENV} must be an integer") from None
    features = load_feature_file(args.features)
    vocab = load_vocab(args.vocab)
    if not features:
        raise CommandError("feature file holds no images")
    D = next(iter(features.values())).D
    shape = parse_kv(args.dims, required=("m", "H"), optional=("a",))
    shape.setdefault("a", shape["H"])
    dims = DecoderDims(V=len(vocab), m=shape["m"], H=shape["H"], D=D, a=shape["a"])
    run_config = {**config.__dict__, "dims": dims.__dict__, "max_len": args.max_len}
    write_manifest(args.out, "train", run_config,
                   {"features": args.features, "captions": args.captions,
                    "vocab": args.vocab, "config": args.config}, config.seed)

    pairs = _training_pairs(features, read_captions(args.captions), vocab, args.max_len)
    params = DecoderParams.init(dims, config.seed)
    params, history = train(pairs, config, params, start_id=vocab.start_id)
    save_checkpoint(params, args.out)
    write_atomic(args.loss_log, format_loss_history(history))
    if args.figure:
        from .plotting import plot_loss_history
        plot_loss_history(history, args.figure)
    if history:
        print(f"trained {len(history)} iterations; final batch loss {history[-1][1]:.6f}")


def _decode_all(args, features, params, vocab):
    config = DecodeConfig(beam_width=1 if args.greedy else args.beam, max_len=args.max_len)
    for image_id, ann in features.items():
        if args.greedy:
            hyp = greedy_search(ann, params, vocab, config.max_len)
        else:
            hyp = beam_search_hypothesis(ann, params, vocab, config)
        yield image_id, ann, hyp


def _check_model(features, params, vocab):
    if len(vocab) != params.dims.V:
        raise CommandError(f"vocabulary has {len(vocab)} entries, checkpoint expects {params.dims.V}")
    for image_id, ann in features.items():
        if ann.D != params.dims.D:
            raise CommandError(f"image {image_id}: feature width {ann.D} != checkpoint D={params.dims.D}")


def cmd_caption(args) -> None:
    method = "greedy" if args.greedy else f"beam{args.beam}"
    write_manifest(args.out, "caption", {"decode": method, "max_len": args.max_len},
                   {"features": args.features, "checkpoint": args.checkpoint, "vocab": args.vocab}, None)
    features = load_feature_file(args.features)
    params = load_checkpoint(args.checkpoint)
    vocab = load_vocab(args.vocab)
    _check_model(features, params, vocab)
    # the decode method is left out of the header so --beam 1 and --greedy files compare equal
    caps = [(iid, decode_ids(hyp.ids, vocab)) for iid, _, hyp in _decode_all(args, features, params, vocab)]
    write_atomic(args.out, format_captions(caps, header("captions", max_len=args.max_len)))
    print(f"captioned {len(caps)} images")


def cmd_evaluate(args) -> None:
    write_manifest(args.out, "evaluate", {},
                   {"candidates": args.candidates, "references": args.references}, None)
    candidates = read_candidate_captions(args.candidates)
    refs = group_references(read_captions(args.references))
    missing = [iid for iid in candidates if iid not in refs]
    if missing:
        raise CommandError(f"no references for image(s) {', '.join(missing[:5])}")
    if not candidates:
        raise CommandError("candidates file holds no captions")
    corpus = [EvalItem(iid, cand, refs[iid]) for iid, cand in candidates.items()]
    result = evaluate(corpus)
    write_atomic(args.out, format_results(result))
    if args.figure:
        from .plotting import plot_scores
        plot_scores(result.as_dict(), args.figure)
    for name, value in result.as_dict().items():
        print(f"{name}\t{value:.4f}")


def cmd_gradcheck(args) -> None:
    dims_kv = parse_kv(args.dims, required=("V", "m", "H", "D", "L", "K"), optional=("a",))
    dims_kv.setdefault("a", dims_kv["H"])
    dims = DecoderDims(*(dims_kv[k] for k in ("V", "m", "H", "D", "a")))
    worst = 0.0
    start = time.perf_counter()
    for lam in args.lam or [0.0, 5.0]:
        params, example = random_problem(dims, dims_kv["L"], dims_kv["K"], seed=args.seed)
        report = grad_check_report(params, example, lam, args.epsilon)
        for name, err in report.items():
            print(f"lambda={lam:g}\t{name}\t{err:.3e}")
        worst = max(worst, max(report.values()))
    print(f"max relative error {worst:.3e} ({time.perf_counter() - start:.1f}s)")
    if worst >= GRADCHECK_TOL:
        raise CommandError(f"gradient check failed: {worst:.3e} >= {GRADCHECK_TOL:g}")


def cmd_attn_trace(args) -> None:
    method = "greedy" if args.greedy else f"beam{args.beam}"
    write_manifest(args.out, "attn-trace", {"decode": method, "max_len": args.max_len},
                   {"features": args.features, "checkpoint": args.checkpoint, "vocab": args.vocab}, None)
    features = load_feature_file(args.features)
    params = load_checkpoint(args.checkpoint)
    vocab = load_vocab(args.vocab)
    _check_model(features, params, vocab)
    lines = [header("attn-trace", decode=method, max_len=args.max_len)]
    figures = []
    for image_id, ann, hyp in _decode_all(args, features, params, vocab):
        words = [vocab.id_to_token[i] for i in hyp.ids]
        lines.append(f"# image {image_id} L={ann.L}")
        for word, alpha in zip(words, hyp.alphas):
            lines.append(word + "\t" + "\t".join(f"{a:.6f}" for a in alpha))
        figures.append((image_id, words, np.array(hyp.alphas)))
    write_atomic(args.out, "\n".join(lines) + "\n")
    if args.figures:
        from .plotting import plot_attention
        os.makedirs(args.figures, exist_ok=True)
        for image_id, words, alphas in figures:
            caption = " ".join(strip_end(words, vocab.id_to_token[vocab.end_id]))
            plot_attention(words, alphas, os.path.join(args.figures, f"{image_id}.png"), title=caption)


# -- argument parsing -------------------------------------------------------

def _decode_flags(p):
    group = p.add_mutually_exclusive_group()
    group.add_argument("--beam", type=int, default=4, help="beam width (default 4)")
    group.add_argument("--greedy", action="store_true", help="argmax decoding")
    p.add_argument("--max-len", type=int, default=50)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="capforge", description=__doc__)
    parser.add_argument("--version", action="version", version=f"capforge {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-vocab", help="build a vocabulary from captions")
    p.add_argument("--captions", required=True, help="COCO JSON or image_id<TAB>caption file")
    p.add_argument("--min-count", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("featurize", help="annotation matrices via the synthetic extractor")
    p.add_argument("--images", required=True, help="directory of <image_id>.npy/.png/.jpg")
    p.add_argument("--boxes", required=True, help="lines of 'image_id x y w h score'")
    p.add_argument("--synthetic-seed", type=int, required=True)
    p.add_argument("--top-n", type=int, default=5)
    p.add_argument("--feature-dim", type=int, default=4096)
    p.add_argument("--mean-pixel", default="0", help="comma-separated per-channel mean")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("train", help="train the attention decoder")
    p.add_argument("--features", required=True)
    p.add_argument("--captions", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--dims", default="m=1000,H=1000", help="model widths m, H and optionally a")
    p.add_argument("--max-len", type=int, default=50)
    p.add_argument("--out", required=True)
    p.add_argument("--loss-log", required=True)
    p.add_argument("--figure", help="also render the loss curve to this PNG")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("caption", help="generate captions")
    p.add_argument("--features", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    _decode_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("evaluate", help="BLEU, ROUGE-L and CIDEr scores")
    p.add_argument("--candidates", required=True)
    p.add_argument("--references", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--figure", help="also render a bar chart of the scores to this PNG")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of the backward pass")
    p.add_argument("--dims", default="V=12,m=5,H=8,D=6,L=4,K=5")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lambda", dest="lam", type=float, action="append",
                   help="penalty weight; repeatable (default: 0 and 5)")
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("attn-trace", help="per-word attention weights of generated captions")
    p.add_argument("--features", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    _decode_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--figures", help="directory for one attention heatmap PNG per image")
    p.set_defaults(func=cmd_attn_trace)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (CommandError, FeatureFileError, CheckpointError, ValueError, OSError) as exc:
        print(f"capforge {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
