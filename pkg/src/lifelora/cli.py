"""Command-line driver: ``lifelora <command> ...``."""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import kbstore as kbs
from . import lifecycle as lc
from .errors import LifeLoraError, UsageError
from .skillgen import SkillStream

_TYPES = {"int": int, "float": float, "str": str, "str | None": str}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON file with RunConfig fields; flags override it")
    g = p.add_argument_group("run config")
    for f in fields(lc.RunConfig):
        kw = {"dest": f"cfg_{f.name}", "default": None, "type": _TYPES[str(f.type)]}
        if f.name == "method":
            kw["choices"] = lc.METHODS
        g.add_argument("--" + f.name.replace("_", "-"), **kw)


def _config(args) -> lc.RunConfig:
    base = {}
    if getattr(args, "config", None):
        try:
            base = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{args.config}: not JSON ({exc})") from exc
    for f in fields(lc.RunConfig):
        v = getattr(args, f"cfg_{f.name}", None)
        if v is not None:
            base[f.name] = v
    return lc.RunConfig.from_dict(base).validate()


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True, default=lambda o: o.tolist() if isinstance(o, np.ndarray) else str(o))


def cmd_gen_stream(args) -> int:
    cfg = _config(args)
    stream = cfg.stream()
    out = Path(args.out)
    stream.save(out)
    print(f"wrote {len(stream.train)} training + {len(stream.holdout)} holdout skills to {out}")
    return 0


def cmd_train_stream(args) -> int:
    cfg = _config(args)
    out = Path(args.out or cfg.out_dir or "run")
    out.mkdir(parents=True, exist_ok=True)
    stream = SkillStream.load(args.stream) if args.stream else cfg.stream()

    def progress(t, kb, row):
        if not args.quiet:
            done = " ".join("--" if v is None else f"{v:.2f}" for v in row)
            print(f"stage {t + 1}/{len(stream.train)}: {done}", file=sys.stderr)

    kb, report = lc.train_stream(cfg, stream, on_stage=progress)
    kbs.save(kb, out / "kb.abk")
    stream.save(out / "stream.json")
    for fmt in ("json", "csv", "plotdata"):
        lc.emit_report(report, fmt, out)
    print(_dump(report.summary))
    return 0


def _session(path):
    kb = kbs.load(path)
    cfg, model, embedder = lc.session_from_kb(kb)
    return kb, cfg, model, embedder


def cmd_infer(args) -> int:
    kb, cfg, model, embedder = _session(args.kb)
    try:
        tokens = [int(t) for t in args.input.replace(",", " ").split()]
    except ValueError as exc:
        raise UsageError(f"--input must be integers: {exc}") from exc
    if not tokens:
        raise UsageError("--input is empty")
    if max(tokens) >= cfg.n_symbols or min(tokens) < 0:
        raise UsageError(f"input tokens must lie in [0, {cfg.n_symbols})")
    mode = args.mode or kb.meta.get("inference_mode", "aggregate")
    res = lc.infer(kb, model, embedder, args.instruction, tokens, mode, cfg.gamma)
    out = {
        "tokens": list(res.tokens),
        "omega": [round(float(w), 6) for w in res.omega],
        "skill_ids": kb.skill_ids,
        "top1_skill": res.top1_skill,
        "gates": list(res.gates),
        "mode": mode,
    }
    print(_dump(out) if args.json else " ".join(map(str, res.tokens)))
    return 0


def cmd_eval(args) -> int:
    kb, cfg, model, embedder = _session(args.kb)
    stream = SkillStream.load(args.stream) if args.stream else cfg.stream()
    mode = args.mode or kb.meta.get("inference_mode", "aggregate")
    res = lc.evaluate(kb, stream, model, embedder, mode, cfg.gamma, args.episodes)
    if stream.holdout:
        res.update(lc.evaluate(kb, stream, model, embedder, mode, cfg.gamma, args.episodes, skills=stream.holdout))
    names = {s.skill_id: s.name for s in stream.specs}
    rows = [{"skill_id": k, "name": names[k], "asr": v["asr"], "fr": v["fr"]} for k, v in res.items()]
    if args.json:
        print(_dump(rows))
    else:
        for r in rows:
            fr = "undefined" if r["fr"] is None else f"{r['fr']:+.3f}"
            print(f"{r['skill_id']:>3}  {r['name']:<48} ASR {r['asr']:.3f}  FR {fr}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    methods = args.methods or ["full", "no-GGM", "no-INA", "no-SOT", "seq-ft"]
    for m in methods:
        if m not in lc.METHODS:
            raise UsageError(f"unknown method {m!r}")

    def progress(m, s, rep):
        print(f"{m:>8} seed {s}: avg FR {rep.summary['avg_fr']}", file=sys.stderr)

    grid = lc.run_grid(cfg, methods, args.seeds, progress)
    table = {}
    for m, runs in grid.items():
        frs = [r["avg_fr"] for r in runs if r["avg_fr"] is not None]
        table[m] = {
            "median_avg_fr": float(np.median(frs)) if frs else None,
            "median_avg_asr": float(np.median([r["avg_asr"] for r in runs])),
            "runs": runs,
        }
    text = _dump({"seeds": args.seeds, "methods": table})
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_study(args) -> int:
    kb, cfg, model, embedder = _session(args.kb)
    stream = SkillStream.load(args.stream) if args.stream else cfg.stream()
    print(_dump(lc.observation_study(kb, stream, embedder)))
    return 0


def cmd_kb_inspect(args) -> int:
    info = kbs.inspect(args.path)
    if args.json:
        print(_dump(info))
        return 0
    fp = info["fingerprint"]
    print(f"knowledge base v{info['version']}  {info['file_bytes']} bytes  embedding {info['embedding_digest']}")
    print("fingerprint: " + ", ".join(f"{k}={fp[k]}" for k in sorted(fp)))
    for r in info["records"]:
        sr = "-" if r["sr_gt"] is None else f"{r['sr_gt']:.2f}"
        print(f"  [{r['skill_id']:>2}] {r['name']:<48} gates {r['gates']}  SR_gt {sr}  r={r['rank']} r_s={r['subspace_rank']}")
    return 0


def cmd_report(args) -> int:
    report = lc.load_report(Path(args.run) / "report.json")
    paths = lc.emit_report(report, args.format, args.out or args.run)
    for p in paths:
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lifelora", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-stream", help="write a synthetic skill stream as JSON")
    _add_config_flags(s)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_stream)

    s = sub.add_parser("train-stream", help="learn the stream's skills in order")
    _add_config_flags(s)
    s.add_argument("--stream", help="stream JSON (default: generate from the config)")
    s.add_argument("--out", help="output directory (default: out_dir or ./run)")
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_train_stream)

    s = sub.add_parser("infer", help="route one instruction through the knowledge base and decode")
    s.add_argument("--kb", required=True)
    s.add_argument("--instruction", required=True)
    s.add_argument("--input", required=True, help="input tokens, e.g. '3 1 4 1'")
    s.add_argument("--mode", choices=lc.MODES)
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="per-skill success and forgetting rates")
    s.add_argument("--kb", required=True)
    s.add_argument("--stream")
    s.add_argument("--mode", choices=lc.MODES)
    s.add_argument("--episodes", type=int)
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="train the method grid over several seeds")
    _add_config_flags(s)
    s.add_argument("--methods", nargs="+")
    s.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2, 3, 4])
    s.add_argument("--out")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("study", help="parameter/semantic similarity study on a trained kb")
    s.add_argument("--kb", required=True)
    s.add_argument("--stream")
    s.set_defaults(func=cmd_study)

    s = sub.add_parser("kb", help="knowledge base utilities")
    kb_sub = s.add_subparsers(dest="kb_command", required=True)
    i = kb_sub.add_parser("inspect", help="list stored skills")
    i.add_argument("path")
    i.add_argument("--json", action="store_true")
    i.set_defaults(func=cmd_kb_inspect)

    s = sub.add_parser("report", help="re-emit a finished run's report")
    s.add_argument("--run", required=True, help="run directory holding report.json")
    s.add_argument("--format", choices=("json", "csv", "plotdata"), default="csv")
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except LifeLoraError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return UsageError.exit_code


if __name__ == "__main__":
    sys.exit(main())
