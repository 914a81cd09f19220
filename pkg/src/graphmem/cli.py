"""Command-line surface.

Settings resolve as: command-line flag, then the ``--config`` file, then the
built-in default. Failures print one JSON object on stderr and exit 1; usage
errors exit 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Sequence

from graphmem.evaluation import (
    DEFAULT_CAPACITIES,
    DEFAULT_LENGTHS,
    PARADIGMS,
    AblationSetup,
    ablation_suite,
    answer_spread,
    build_scaling_exponent,
    capacity_sweep,
    evaluate,
    text_table,
    timing_harness,
    timing_rows_as_dicts,
    to_csv,
)
from graphmem.extraction import RuleExtractor
from graphmem.latent import EmbedderParams, RetrieverParams, retrieve
from graphmem.model import BuildConfig, QAInstance
from graphmem.persistence import (
    atomic_write,
    load_checkpoint,
    load_config,
    load_dataset,
    load_memory,
    save_checkpoint,
    save_dataset,
    save_memory,
    to_dot,
)
from graphmem.reasoner import Memory, MockReasoner, RemoteReasoner, build_memory
from graphmem.serializer import compose_prompt, serialize
from graphmem.service import ServiceClient, ServiceConfig
from graphmem.synthetic import GenConfig, generate_suite
from graphmem.trainer import TrainConfig, prepare_example, stage2_train, stage3_train

logger = logging.getLogger("graphmem")


@dataclass(frozen=True)
class Setting:
    key: str
    kind: Callable[[str], Any]
    default: Any
    help: str


SETTINGS = (
    Setting("seed", int, 0, "random seed"),
    Setting("M", int, 150, "global edge capacity"),
    Setting("k", int, 30, "retrieval budget in edges"),
    Setting("tau", float, 0.5, "softmax temperature"),
    Setting("d", int, 64, "embedding dimension"),
    Setting("chunk_len", int, 1024, "chunk length in tokens"),
    Setting("overlap", int, 128, "chunk overlap in tokens"),
    Setting("per_chunk_cap", int, 32, "candidates kept per chunk"),
    Setting("field_cap", int, 16, "max tokens per triple field"),
    Setting("lr", float, 0.05, "learning rate"),
    Setting("epochs", int, 150, "training epochs"),
    Setting("batch_size", int, 16, "mini-batch size"),
    Setting("builder_steps", int, 1, "builder-only steps per stage3 cycle"),
    Setting("joint_steps", int, 4, "joint steps per stage3 cycle"),
)
_BY_KEY = {s.key: s for s in SETTINGS}


class CliError(RuntimeError):
    pass


def resolve(args: argparse.Namespace) -> dict[str, Any]:
    """Flag > config file > default, with config values converted by the setting's type."""
    from_file = load_config(args.config) if args.config else {}
    unknown = set(from_file) - set(_BY_KEY)
    if unknown:
        raise CliError(f"unknown config keys: {', '.join(sorted(unknown))}")
    out = {}
    for s in SETTINGS:
        flag = getattr(args, s.key)
        if flag is not None:
            out[s.key] = flag
        elif s.key in from_file:
            try:
                out[s.key] = s.kind(from_file[s.key])
            except ValueError as exc:
                raise CliError(f"config key {s.key}: {exc}") from exc
        else:
            out[s.key] = s.default
    return out


def _build_cfg(o: dict) -> BuildConfig:
    return BuildConfig(o["chunk_len"], o["overlap"], o["per_chunk_cap"], o["M"], o["field_cap"])


def _params(o: dict, path: str | None) -> tuple[EmbedderParams, RetrieverParams]:
    if path:
        ep, rp = load_checkpoint(path)
        if ep.d != o["d"]:
            logger.info("checkpoint dimension %d overrides d=%d", ep.d, o["d"])
        return ep, RetrieverParams(rp.d, rp.W, rp.Q, o["tau"], o["k"])
    ep = EmbedderParams(o["d"])
    return ep, RetrieverParams(o["d"], tau=o["tau"], k=o["k"])


def _train_cfg(o: dict) -> TrainConfig:
    return TrainConfig(
        lr=o["lr"], epochs=o["epochs"], batch_size=o["batch_size"], seed=o["seed"],
        builder_steps=o["builder_steps"], joint_steps=o["joint_steps"],
    )


def _memories(instances: Sequence[QAInstance], cfg: BuildConfig, ep: EmbedderParams) -> list[Memory]:
    extractor = RuleExtractor()
    return [build_memory(i.context, extractor, cfg, ep) for i in instances]


def _emit(text: str, out: str | None) -> None:
    if out:
        atomic_write(out, text.encode("utf-8"))
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _json(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _pick(instances: list[QAInstance], ident: str | None) -> QAInstance:
    if ident is None:
        return instances[0]
    for inst in instances:
        if inst.id == ident:
            return inst
    raise CliError(f"no instance with id {ident!r}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen(args, o) -> None:
    cfg = GenConfig(seed=o["seed"], target_tokens=args.target_tokens, facts_per_doc=args.facts, hops=args.hops)
    save_dataset(args.out, generate_suite(args.n, cfg, prefix=args.prefix))


def _context_and_question(args) -> tuple[str, str | None, QAInstance | None]:
    if args.dataset:
        inst = _pick(load_dataset(args.dataset), args.id)
        return inst.context, inst.question, inst
    if args.context:
        return Path(args.context).read_text(encoding="utf-8"), None, None
    raise CliError("give --context FILE or --dataset FILE")


def cmd_build(args, o) -> None:
    context, _, _ = _context_and_question(args)
    ep, _ = _params(o, args.params)
    cfg = _build_cfg(o)
    mem = build_memory(context, RuleExtractor(), cfg, ep)
    save_memory(args.out, mem.graph, mem.U, cfg)
    r = mem.report
    logger.info("built %d edges from %d chunks (%d evicted)", len(mem.graph), r.chunks_processed, r.evicted_by_cap)


def cmd_retrieve(args, o) -> None:
    loaded = load_memory(args.memory)
    ep, rp = _params(o, args.params)
    sub = retrieve(loaded.graph, loaded.U, args.question, rp, ep)
    text = to_dot(sub) if args.format == "dot" else serialize(sub.edges).text
    _emit(text, args.out)


def cmd_answer(args, o) -> None:
    context, question, inst = _context_and_question(args)
    question = args.question or question
    if not question:
        raise CliError("no question given")
    ep, rp = _params(o, args.params)
    mem = build_memory(context, RuleExtractor(), _build_cfg(o), ep)
    sub = retrieve(mem.graph, mem.U, question, rp, ep)
    prompt = compose_prompt(serialize(sub.edges), question)
    if args.reasoner == "mock":
        if inst is None:
            raise CliError("the mock reasoner needs a dataset instance with gold edges")
        reasoner = MockReasoner(inst)
    else:
        reasoner = RemoteReasoner(ServiceClient(ServiceConfig.from_env()))
    result = {"answer": reasoner.generate(prompt), "edges": [list(e.triple.fields()) for e in sub.edges]}
    _emit(_json(result), args.out)


def cmd_train(args, o) -> None:
    instances = load_dataset(args.dataset)
    ep, rp = _params(o, args.params)
    mems = _memories(instances, _build_cfg(o), ep)
    examples = [prepare_example(i, m, ep) for i, m in zip(instances, mems)]
    cfg = _train_cfg(o)
    if args.stage == "stage2":
        rp, report = stage2_train(examples, ep, rp, cfg)
    else:
        ep, rp, report = stage3_train(examples, ep, rp, cfg)
    save_checkpoint(args.out, ep, rp)
    if args.report:
        atomic_write(args.report, _json(report.to_dict()).encode("utf-8"))
    sys.stdout.write(_json({"baseline_recall": report.baseline_recall, "final_recall": report.final_recall,
                            "checksum": report.checksum}))


def cmd_eval(args, o) -> None:
    instances = load_dataset(args.dataset)
    ep, rp = _params(o, args.params)
    cfg = _build_cfg(o)
    mems = _memories(instances, cfg, ep)
    others = [p for p in args.paradigms if p != "learned"]
    reports = ablation_suite(instances, mems, AblationSetup(ep, rp, cfg), others)
    if "learned" in args.paradigms:
        reports["learned"] = evaluate(instances, mems, ep, rp)
    rows = [reports[p].summary() for p in args.paradigms]
    _emit(to_csv(rows) if args.csv else text_table(rows) + "\n", args.out)


def cmd_bench(args, o) -> None:
    ep, rp = _params(o, args.params)
    cfg = _build_cfg(o)
    if args.kind == "timing":
        rows = timing_harness(args.lengths or DEFAULT_LENGTHS, args.samples, cfg, rp, ep, seed=o["seed"])
        dicts = timing_rows_as_dicts(rows)
        footer = ""
        if len([r for r in rows if r.length > 0]) >= 2:
            footer = (f"answer spread {answer_spread(rows):.4f}  "
                      f"build exponent {build_scaling_exponent(rows):.4f}\n")
        body = to_csv(dicts) if args.csv else text_table(dicts) + "\n" + footer
    else:
        if not args.dataset:
            raise CliError("bench capacity needs --dataset")
        instances = load_dataset(args.dataset)
        acc = capacity_sweep(instances, args.capacities or DEFAULT_CAPACITIES, ep, rp, cfg)
        dicts = [{"M": m, "accuracy": a} for m, a in acc.items()]
        body = to_csv(dicts) if args.csv else text_table(dicts) + "\n"
    _emit(body, args.out)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _int_list(s: str) -> list[int]:
    try:
        return [int(x) for x in s.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}")


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("settings (flag > config file > default)")
    g.add_argument("--config", help="key = value settings file")
    for s in SETTINGS:
        flag = "--" + s.key.replace("_", "-")
        g.add_argument(flag, dest=s.key, type=s.kind, default=None, help=f"{s.help} (default {s.default})")
    g.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    g.add_argument("--params", help="parameter checkpoint to start from")

    p = argparse.ArgumentParser(prog="graphmem", description="Capacity-bounded graph memory for long-context QA.")
    sub = p.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", parents=[common], help="write a synthetic JSONL suite")
    gen.add_argument("--n", type=int, default=200)
    gen.add_argument("--target-tokens", type=int, default=3000)
    gen.add_argument("--facts", type=int, default=12)
    gen.add_argument("--hops", type=int, choices=[1, 2], default=2)
    gen.add_argument("--prefix", default="syn")
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=cmd_gen)

    def source(sp):
        sp.add_argument("--context", help="plain-text context file")
        sp.add_argument("--dataset", help="JSONL dataset")
        sp.add_argument("--id", help="instance id inside --dataset (default: first)")

    b = sub.add_parser("build", parents=[common], help="context -> memory file")
    source(b)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_build)

    r = sub.add_parser("retrieve", parents=[common], help="memory + question -> subgraph")
    r.add_argument("--memory", required=True)
    r.add_argument("--question", required=True)
    r.add_argument("--format", choices=["text", "dot"], default="text")
    r.add_argument("--out")
    r.set_defaults(func=cmd_retrieve)

    a = sub.add_parser("answer", parents=[common], help="build, retrieve and answer")
    source(a)
    a.add_argument("--question")
    a.add_argument("--reasoner", choices=["mock", "remote"], default="mock")
    a.add_argument("--out")
    a.set_defaults(func=cmd_answer)

    t = sub.add_parser("train", parents=[common], help="fit retrieval parameters")
    t.add_argument("stage", choices=["stage2", "stage3"])
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--report", help="write the training report as JSON")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="metrics on a dataset")
    e.add_argument("--dataset", required=True)
    e.add_argument("--paradigms", nargs="+", choices=PARADIGMS, default=["learned"])
    e.add_argument("--csv", action="store_true")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    be = sub.add_parser("bench", parents=[common], help="latency or capacity benchmarks")
    be.add_argument("kind", choices=["timing", "capacity"])
    be.add_argument("--lengths", type=_int_list)
    be.add_argument("--samples", type=int, default=100)
    be.add_argument("--capacities", type=_int_list)
    be.add_argument("--dataset")
    be.add_argument("--csv", action="store_true")
    be.add_argument("--out")
    be.set_defaults(func=cmd_bench)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    try:
        options = resolve(args)
        args.func(args, options)
    except Exception as exc:  # noqa: BLE001 - every failure becomes a structured error
        logger.debug("command failed", exc_info=True)
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
