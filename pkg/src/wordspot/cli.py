"""Command line front end: synth, train, index, query and eval."""

import argparse
import json
import logging
import os
import sys
import time

import numpy as np
from PIL import Image

from .errors import DataError, FormatError, MissingData, MissingPageMap
from .evaluation import read_truth_dir, write_truth
from .integral import load_page_map, map_cache_name, save_page_map
from .layout import load_index, save_index
from .pipeline import Searcher, TrainParams, evaluate, index_pages, load_bundle, save_bundle, train
from .synth import CorpusSpec, generate

log = logging.getLogger("wordspot")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 2, 3, 4
PAGE_EXTS = (".png", ".pgm", ".tif", ".tiff", ".jpg", ".jpeg", ".bmp")


# -- file helpers ------------------------------------------------------------

def read_pages(directory):
    """Greyscale uint8 rasters keyed by file stem."""
    if not os.path.isdir(directory):
        raise MissingData(f"pages directory not found: {directory}")
    pages = {}
    for name in sorted(os.listdir(directory)):
        stem, ext = os.path.splitext(name)
        if ext.lower() in PAGE_EXTS:
            path = os.path.join(directory, name)
            try:
                with Image.open(path) as im:
                    pages[stem] = np.asarray(im.convert("L"), dtype=np.uint8)
            except OSError as e:
                raise DataError(f"{path}: {e}") from e
    return pages


def write_page(path, raster):
    Image.fromarray(np.asarray(raster, dtype=np.uint8)).save(path, format="PNG")


def load_config(path):
    if not path:
        return {}
    try:
        with open(path, encoding="utf-8") as f:
            cfg = json.load(f)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: {e}") from e
    if not isinstance(cfg, dict):
        raise FormatError(f"{path}: expected a JSON object")
    return cfg


def resolve_params(args):
    cfg = load_config(args.config)
    known = set(TrainParams().to_dict())
    unknown = sorted(set(cfg) - known)
    if unknown:
        raise DataError(f"unknown config keys: {', '.join(unknown)}")
    merged = TrainParams().to_dict()
    merged.update(cfg)
    if args.block is not None:
        merged["block"] = args.block
    if args.seed is not None:
        merged["seed"] = args.seed
    params = TrainParams.from_dict(merged)
    if params.block < 1 or params.k < 1 or params.d_red < 1 or not params.scales:
        raise DataError("block, k and d_red must be positive and scales non-empty")
    return params


def load_maps(directory, index, bundle_hash, block):
    maps = {}
    for pid, _, _ in index.pages:
        path = os.path.join(directory, map_cache_name(pid, bundle_hash, block))
        if not os.path.exists(path):
            raise MissingPageMap(f"no cached page map for {pid} at {path}")
        amap, h = load_page_map(path, mmap=True)
        if h != bundle_hash:
            raise FormatError(f"{path}: page map built with a different bundle")
        maps[pid] = amap
    return maps


def open_searcher(args, need_pages):
    bundle, bhash = load_bundle(args.bundle)
    index = load_index(args.index)
    if index.bundle_hash != bhash:
        raise FormatError(f"{args.index} was built with a different bundle than {args.bundle}")
    maps = load_maps(args.maps, index, bhash, bundle.params.block)
    pages = read_pages(args.pages) if need_pages else None
    return Searcher(bundle, index, maps, pages)


def format_hit(hit, stage, fmt):
    if fmt == "jsonl":
        return json.dumps({"page_id": hit.page_id, "box": list(hit.box),
                           "score": round(float(hit.score), 6), "stage": stage})
    x, y, w, h = hit.box
    return f"{hit.page_id} {x} {y} {w} {h} {hit.score:.6f} {stage}"


def _emit(lines, out):
    text = "".join(line + "\n" for line in lines)
    if out:
        with open(out, "w", encoding="utf-8") as f:
            f.write(text)
    else:
        sys.stdout.write(text)


# -- commands ----------------------------------------------------------------

def cmd_synth(args):
    spec = CorpusSpec(seed=args.seed or 0) if args.pages_count is None else \
        CorpusSpec(seed=args.seed or 0, pages=args.pages_count)
    corpus = generate(spec)
    for split, ids in (("train", corpus.train), ("test", corpus.test)):
        pdir = os.path.join(args.out, split, "pages")
        gdir = os.path.join(args.out, split, "gt")
        os.makedirs(pdir, exist_ok=True)
        os.makedirs(gdir, exist_ok=True)
        for pid in ids:
            write_page(os.path.join(pdir, f"{pid}.png"), corpus.pages[pid])
            write_truth(os.path.join(gdir, f"{pid}.txt"), corpus.truth[pid])
    print(f"wrote {len(corpus.train)} train and {len(corpus.test)} test pages to {args.out}")


def cmd_train(args):
    params = resolve_params(args)
    print("config " + json.dumps(params.to_dict(), sort_keys=True), file=sys.stderr)
    pages = read_pages(args.pages)
    truth = read_truth_dir(args.gt)
    missing = sorted(set(truth) - set(pages))
    if missing:
        log.warning("ground truth without page image: %s", ", ".join(missing))
    bundle = train(pages, truth, params)
    digest = save_bundle(args.bundle, bundle)
    for name in ("phoc_block", "phoc_word", "phob"):
        m = getattr(bundle, name)
        corr = " ".join(f"{c:.3f}" for c in np.asarray(m.correlations)[:5])
        print(f"{name}: {len(m.degenerate)} degenerate attributes, d'={m.dims}, "
              f"top correlations {corr}", file=sys.stderr)
    print(f"bundle {args.bundle} sha256 {digest}")


def cmd_index(args):
    bundle, bhash = load_bundle(args.bundle)
    pages = read_pages(args.pages)
    if not pages:
        raise MissingData(f"no page images in {args.pages}")
    corpus = index_pages(bundle, pages, bhash)
    os.makedirs(args.maps, exist_ok=True)
    for pid in sorted(corpus.maps):
        save_page_map(os.path.join(args.maps, map_cache_name(pid, bhash, bundle.params.block)),
                      corpus.maps[pid], bhash)
    save_index(args.index, corpus.index)
    counts = {}
    for r in corpus.index.regions.values():
        counts[r.page_id] = counts.get(r.page_id, 0) + 1
    manifest = []
    for pid in sorted(pages):
        entry = {"page_id": pid, "status": "skipped" if pid in corpus.skipped else "indexed",
                 "regions": counts.get(pid, 0)}
        if pid in corpus.skipped:
            entry["reason"] = corpus.skipped[pid]
        manifest.append(entry)
    with open(os.path.join(args.maps, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump({"bundle": bhash, "pages": manifest}, f, indent=1, sort_keys=True)
        f.write("\n")
    print(f"indexed {len(corpus.maps)} pages, {len(corpus.index.regions)} regions, "
          f"{len(corpus.skipped)} skipped")


def cmd_query(args):
    rerank = args.rerank or 0
    searcher = open_searcher(args, need_pages=rerank > 0)
    initial, reranked, timings, plan = searcher.query(args.text, args.n, rerank)
    result = reranked if reranked is not None else initial
    lines = []
    for h in result.hits:
        stage = "reranked" if h.rescored else "initial"
        lines.append(format_hit(h, stage, args.format))
    _emit(lines, args.out)
    if plan.skipped:
        print(f"bigrams not in index: {' '.join(plan.skipped)}", file=sys.stderr)
    stages = " ".join(f"{k}={timings[k]:.3f}s" for k in ("plan", "scan", "rerank") if k in timings)
    print(f"timings {stages} candidates={len(plan.regions)} hits={len(result.hits)}",
          file=sys.stderr)


def _percentiles(values):
    if not values:
        return {}
    v = np.asarray(values)
    return {f"p{q}": float(np.percentile(v, q)) for q in (50, 90, 99)}


def cmd_eval(args):
    rerank = args.rerank or 0
    searcher = open_searcher(args, need_pages=rerank > 0)
    truth = read_truth_dir(args.gt)
    truth = {pid: t for pid, t in truth.items() if pid in searcher.page_sizes}
    if not truth:
        raise MissingData("no ground truth for any indexed page")
    t0 = time.perf_counter()
    res = evaluate(searcher, truth, args.n, rerank, args.line_mode)
    total = time.perf_counter() - t0
    report = {"n": args.n, "rerank": rerank, "line_mode": bool(args.line_mode),
              "queries": len(res["queries"]), "failed": res["failed"], "total_seconds": total}
    for stage in ("initial", "reranked"):
        if stage in res:
            r = res[stage]
            report[stage] = {"mAP": r.mean_ap, "per_query": r.per_query,
                             "excluded": len(r.excluded)}
    report["timings"] = {k: _percentiles([t[k] for t in res["timings"] if k in t])
                         for k in ("plan", "scan", "rerank")}
    for q in sorted(report["initial"]["per_query"]):
        row = f"{q}\t{report['initial']['per_query'][q]:.4f}"
        if "reranked" in report:
            row += f"\t{report['reranked']['per_query'][q]:.4f}"
        print(row)
    for stage in ("initial", "reranked"):
        if stage in report:
            print(f"mAP {stage} {report[stage]['mAP']:.4f} "
                  f"(excluded {report[stage]['excluded']} queries)")
    for k, p in report["timings"].items():
        if p:
            print(f"{k} " + " ".join(f"{q}={v:.3f}s" for q, v in p.items()))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump(report, f, indent=1, sort_keys=True)
            f.write("\n")


# -- entry point -------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="wordspot", description="Query-by-string word spotting.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def positive(text):
        v = int(text)
        if v < 1:
            raise argparse.ArgumentTypeError("must be >= 1")
        return v

    def percent(text):
        v = float(text)
        if not 0 <= v <= 100:
            raise argparse.ArgumentTypeError("must be within [0, 100]")
        return v

    p = sub.add_parser("synth", help="render a synthetic train/test corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--page-count", dest="pages_count", type=positive)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="fit vocabularies and attribute models")
    p.add_argument("--pages", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--config")
    p.add_argument("--block", type=positive)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("index", help="build the bigram index and page maps")
    p.add_argument("--pages", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--maps", required=True)
    p.set_defaults(func=cmd_index)

    for name, func in (("query", cmd_query), ("eval", cmd_eval)):
        p = sub.add_parser(name, help="run one query" if name == "query" else "score every query")
        if name == "query":
            p.add_argument("text")
            p.add_argument("--format", choices=("text", "jsonl"), default="text")
        else:
            p.add_argument("--gt", required=True)
            p.add_argument("--line-mode", action="store_true")
        p.add_argument("--bundle", required=True)
        p.add_argument("--index", required=True)
        p.add_argument("--maps", required=True)
        p.add_argument("--pages", help="page rasters, needed for re-ranking")
        p.add_argument("--n", type=positive, default=30)
        p.add_argument("--rerank", type=percent, default=0.0)
        p.add_argument("--out")
        p.set_defaults(func=func)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if getattr(args, "rerank", 0) and not args.pages:
        parser.error("--rerank needs --pages")
    try:
        args.func(args)
    except (DataError, FileNotFoundError, IsADirectoryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:  # noqa: BLE001 - last resort, reported as internal
        log.exception("internal error")
        print(f"internal error: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
