"""Command line entry point.

Exit codes: 0 success, 1 domain error (bad files, infeasible placement,
unreachable services ...), 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from langplace.adapter import AdapterPair, TrainConfig, load_weights, save_weights, train
from langplace.core import load_scene
from langplace.embeddings import (
    EmbeddingStore, HttpProvider, StoreProvider, SyntheticProvider, SyntheticWorld, build_store,
)
from langplace.grounding import ground_all
from langplace.harness import (
    DEFAULT_COUNTS, DatasetSpec, gen_dataset, level_counts, read_dataset, run_eval, tokens_for,
    write_dataset,
)
from langplace.parser import Lexicon, LlmClient, parse
from langplace.pipeline import ground_and_place, identity_pair
from langplace.placement import PlacementField, PlacementParams, render_field

log = logging.getLogger("langplace")


def _load_config(path):
    if not path:
        return {}
    with open(path) as fh:
        return json.load(fh)


def _lexicon(args):
    return Lexicon.load(args.lexicon) if getattr(args, "lexicon", None) else Lexicon.default()


def _provider(args, config):
    kind = getattr(args, "provider", "synthetic")
    if kind == "store":
        if not args.store:
            raise ValueError("--provider store needs --store PATH")
        return StoreProvider(EmbeddingStore.load(args.store))
    if kind == "http":
        return HttpProvider()
    world = config.get("world", {})
    return SyntheticProvider(SyntheticWorld(
        dim=world.get("dim", 512),
        noise_sigma=world.get("noise_sigma", 0.05),
        seed=world.get("seed", 0),
        aliases=world.get("aliases", {}),
    ))


def _params(config) -> PlacementParams:
    return PlacementParams.from_dict(config.get("placement", {}))


def _pair(args, provider, config):
    if getattr(args, "weights", None):
        return load_weights(args.weights, expected_dim=provider.dim)
    dim = provider.dim or config.get("world", {}).get("dim", 512)
    return identity_pair(dim)


def cmd_gen_dataset(args, config):
    counts = dict(DEFAULT_COUNTS)
    if args.train is not None:
        counts["train"] = level_counts(args.train)
    if args.test is not None:
        for split in ("test_seen", "test_unseen_obj", "test_unseen_inst"):
            counts[split] = level_counts(args.test)
    if args.splits:
        counts = {k: v for k, v in counts.items() if k in args.splits}
    records = gen_dataset(DatasetSpec(counts=counts, seed=args.seed), _lexicon(args), _params(config))
    write_dataset(records, args.out)
    print(f"wrote {len(records)} records to {args.out}")


def cmd_embed(args, config):
    records = read_dataset(args.dataset)
    provider = _provider(args, config)
    texts = sorted({t.render() for r in records for t in r.gt_tuples})
    store = build_store(provider, [r.scene for r in records], texts)
    out = Path(args.out or Path(args.dataset) / "embeddings.jsonl")
    if args.binary:
        store.save_binary(out)
    else:
        store.save_jsonl(out)
    print(f"wrote {len(store)} embeddings (D={store.dim}) to {out}")


def cmd_train(args, config):
    records = read_dataset(args.dataset, splits=["train"])
    if args.limit:
        records = records[: args.limit]
    provider = _provider(args, config)
    cfg = dict(config.get("train", {}))
    for key in ("steps", "learning_rate", "optimizer", "batch_size"):
        if getattr(args, key) is not None:
            cfg[key] = getattr(args, key)
    cfg.setdefault("seed", args.seed)
    cfg = TrainConfig.from_dict(cfg)
    pair = AdapterPair.create(dim=provider.dim or 512, hidden=config.get("hidden", 112), seed=cfg.seed)
    trained, trace = train(pair, [r.train_sample() for r in records], cfg, provider,
                           tokens=tokens_for(records, provider))
    save_weights(trained, args.out)
    if args.trace:
        np.savetxt(args.trace, trace, delimiter=",", header="loss", comments="")
    if args.figure:
        from langplace.plotting import plot_loss
        plot_loss(trace, args.figure)
    tail = trace[-min(len(trace), 500):].mean() if len(trace) else float("nan")
    print(f"trained {cfg.steps} steps on {len(records)} scenes; final loss {tail:.4g}; weights -> {args.out}")


def cmd_ground(args, config):
    scene = load_scene(args.scene)
    provider = _provider(args, config)
    lex = _lexicon(args)
    parsed = parse(args.instruction, lex, LlmClient() if args.llm else None)
    pairs = ground_all(scene, parsed, _pair(args, provider, config), provider, lex)
    for t, g in zip(parsed.tuples, pairs):
        name = "table" if g.object_index == scene.n_objects else scene.objects[g.object_index].name
        print(f"{g.object_index}\t{name}\t{g.relation.value}\t({t.ref_expr} | {t.rel_expr})")


def cmd_place(args, config):
    scene = load_scene(args.scene)
    provider = _provider(args, config)
    lex = _lexicon(args)
    result = ground_and_place(scene, args.instruction, _pair(args, provider, config), provider, lex,
                              _params(config), seed=args.seed, llm=LlmClient() if args.llm else None)
    if args.render:
        render_field(result.field, scene, args.render)
    if args.dump:
        result.field.dump(args.dump)
    if args.figure:
        from langplace.plotting import plot_field
        plot_field(result.field, scene, args.figure, sample=result.point, title=args.instruction)
    print(f"{result.point.x:.4f},{result.point.y:.4f}")


def cmd_eval(args, config):
    provider = _provider(args, config)
    pair = None if args.oracle else _pair(args, provider, config)
    records = read_dataset(args.dataset, splits=args.split)
    report = run_eval(records, pair, provider, _lexicon(args), _params(config), seed=args.seed,
                      oracle=args.oracle, llm=LlmClient() if args.llm else None, workers=args.workers)
    text = report.dumps()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            csv.writer(fh).writerows(report.csv_rows())
    if args.figures:
        from langplace.plotting import plot_eval
        Path(args.figures).mkdir(parents=True, exist_ok=True)
        plot_eval(report, Path(args.figures) / "eval.png")


def cmd_render(args, config):
    doc = json.loads(Path(args.field).read_text())
    scene = load_scene(args.scene) if args.scene else None
    ny, nx = doc["height_cells"], doc["width_cells"]
    if scene is not None:
        ws = scene.workspace
    else:
        from langplace.core import Workspace
        ws = Workspace(nx * doc["resolution"], ny * doc["resolution"])
    field = PlacementField(ws, doc["resolution"], np.asarray(doc["probs"], dtype=float).reshape(ny, nx),
                           np.asarray(doc["mask"], dtype=bool).reshape(ny, nx))
    render_field(field, scene, args.out, scale=args.scale)
    print(f"wrote {args.out}")


def cmd_parse(args, config):
    lex = _lexicon(args)
    parsed = parse(args.instruction, lex, LlmClient() if args.llm else None)
    for t in parsed.tuples:
        flag = "" if t.canonical else "\t[non-canonical]"
        print(f"({t.ref_expr} | {t.rel_expr}){flag}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="langplace", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="JSON config with train / placement / world sections")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def provider_opts(sp):
        sp.add_argument("--provider", choices=("synthetic", "store", "http"), default="synthetic")
        sp.add_argument("--store", help="embedding store (JSONL or EMB1) for --provider store")

    sp = sub.add_parser("gen-dataset", help="generate a synthetic dataset directory")
    sp.add_argument("--out", required=True)
    sp.add_argument("--train", type=int, help="number of training scenes (default 2000)")
    sp.add_argument("--test", type=int, help="scenes per test subset (default 400)")
    sp.add_argument("--splits", nargs="+", choices=tuple(DEFAULT_COUNTS))
    sp.add_argument("--lexicon")
    sp.set_defaults(func=cmd_gen_dataset)

    sp = sub.add_parser("embed", help="precompute an embedding store for a dataset")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--out")
    sp.add_argument("--binary", action="store_true", help="write EMB1 instead of JSON Lines")
    provider_opts(sp)
    sp.set_defaults(func=cmd_embed)

    sp = sub.add_parser("train", help="train the adapters on a dataset's train split")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--out", required=True, help="weights file to write")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--learning-rate", dest="learning_rate", type=float)
    sp.add_argument("--optimizer", choices=("adam", "sgd"))
    sp.add_argument("--batch-size", dest="batch_size", type=int)
    sp.add_argument("--limit", type=int, help="use only the first N training scenes")
    sp.add_argument("--trace", help="write the per-step loss as CSV")
    sp.add_argument("--figure", help="write a loss-curve PNG")
    provider_opts(sp)
    sp.set_defaults(func=cmd_train)

    for name, func, help_ in (("ground", cmd_ground, "ground an instruction in a scene"),
                              ("place", cmd_place, "sample a placement for an instruction")):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--scene", required=True)
        sp.add_argument("--instruction", required=True)
        sp.add_argument("--weights")
        sp.add_argument("--lexicon")
        sp.add_argument("--llm", action="store_true", help="parse with the LLM at PLACE_LLM_URL")
        provider_opts(sp)
        if name == "place":
            sp.add_argument("--render", help="heatmap output (.ppm or .svg)")
            sp.add_argument("--dump", help="field dump JSON")
            sp.add_argument("--figure", help="matplotlib PNG of the field and sample")
        sp.set_defaults(func=func)

    sp = sub.add_parser("eval", help="success-rate evaluation on a dataset")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--weights")
    sp.add_argument("--split", nargs="+", default=["test_seen"])
    sp.add_argument("--oracle", action="store_true", help="inject ground-truth tuples and groundings")
    sp.add_argument("--out", help="report JSON (default stdout)")
    sp.add_argument("--csv", help="per-level summary CSV")
    sp.add_argument("--figures", help="directory for report figures")
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--lexicon")
    sp.add_argument("--llm", action="store_true")
    provider_opts(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("render", help="render a field dump as PPM or SVG")
    sp.add_argument("--field", required=True)
    sp.add_argument("--scene")
    sp.add_argument("--out", required=True)
    sp.add_argument("--scale", type=int, default=4)
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("parse", help="parse an instruction into tuples")
    sp.add_argument("instruction")
    sp.add_argument("--lexicon")
    sp.add_argument("--llm", action="store_true")
    sp.set_defaults(func=cmd_parse)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "eval" and args.weights and not Path(args.weights).exists():
            from langplace.adapter import FormatError
            raise FormatError(f"weights file {args.weights} does not exist")
        args.func(args, _load_config(args.config))
    except (ValueError, KeyError, RuntimeError, OSError, IndexError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
