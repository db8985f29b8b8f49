import argparse
import json
import sys
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from . import accmin, costmodel
from .analysis import RangeMap, analyze
from .errors import SiraError
from .graph import Graph, load_graph, lower, save_graph
from .interpreter import run, verify_ranges
from .log import get_logger, setup_logging
from .streamline import POLICIES, max_relative_deviation, streamline
from .threshold import DOMAIN_CAP, ThresholdConverter, find_tails
from .zoo import MODELS, RANDOM_MODELS, fc_ranges

logger = get_logger(__name__)

SWEEP_ALIASES = {"no": "n_o", "ni": "n_i", "np": "n_p", "c": "C", "pe": "PE"}
POT_NOTE = "power-of-two flags are informational; their savings are not modeled"


def _dump(doc: Any) -> str:
    return json.dumps(doc, indent=2)


def _emit(text: str, path: Optional[Path]) -> None:
    if path is None:
        sys.stdout.write(text + "\n")
    else:
        path.write_text(text + "\n")


def load_ranges(path: Optional[Path], g: Graph) -> RangeMap:
    """Read a range file ({tensor: {"range": ..., "int_range"?, "scale"?, "bias"?}})"""
    if path is None:
        return RangeMap()
    doc = json.loads(path.read_text())
    if not isinstance(doc, dict):
        raise SiraError(f"range file {path} must hold a JSON object")
    return RangeMap.from_dict(doc, g)


def parse_sweep(text: str) -> tuple:
    """'no=2..12' -> ('n_o', [2, ..., 12])"""
    try:
        key, span = text.split("=", 1)
        lo, hi = span.split("..", 1)
        values = list(range(int(lo), int(hi) + 1))
    except ValueError:
        raise argparse.ArgumentTypeError(f"sweep must look like 'no=2..12', got '{text}'") from None
    key = SWEEP_ALIASES.get(key.strip().lower(), key.strip())
    if not values:
        raise argparse.ArgumentTypeError(f"empty sweep range '{span}'")
    return key, values


@dataclass
class PipelineConfig:
    graph: Path
    ranges: Optional[Path]
    out_dir: Path
    thresholds: bool = False
    streamline: bool = True
    policy: str = "activation-feeding"
    samples: int = 10000
    seed: int = 0
    pot: bool = False
    max_rel_err: float = 1e-3

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> "PipelineConfig":
        return cls(
            graph=args.graph,
            ranges=args.ranges,
            out_dir=args.out_dir,
            thresholds=args.thresholds,
            streamline=not args.no_streamline,
            policy=args.target_policy,
            samples=args.samples,
            seed=args.seed,
            pot=args.pot,
            max_rel_err=args.max_rel_err,
        )

    def validate(self) -> None:
        if self.thresholds and not self.streamline:
            raise SiraError("--thresholds requires streamlining; drop --no-streamline")
        if self.samples < 1:
            raise SiraError(f"--samples must be at least 1, got {self.samples}")
        if self.max_rel_err <= 0:
            raise SiraError(f"--max-rel-err must be positive, got {self.max_rel_err}")
        if self.policy not in POLICIES:
            raise SiraError(f"unknown target policy '{self.policy}'")
        if self.out_dir.exists() and not self.out_dir.is_dir():
            raise SiraError(f"output path {self.out_dir} is not a directory")
        self.out_dir.mkdir(parents=True, exist_ok=True)


def tail_costs(g: Graph, ranges: RangeMap, annotations: List[accmin.AccumulatorAnnotation],
               max_rel_err: float, pot: bool = False) -> Dict[str, Any]:
    """Composite-vs-threshold recommendation for every layer tail of a streamlined graph"""
    acc_bits = {a.output: a.sira_bits for a in annotations if a.sira_bits}
    entries = []
    for tail in find_tails(g, ranges):
        q = g.nodes[tail.quant]
        params = {
            name for i in tail.nodes if i != tail.quant
            for name in g.nodes[i].inputs if g.is_constant(name)
        }
        formats = {name: costmodel.fit_fixed_point(g.constant(name), max_rel_err) for name in sorted(params)}
        n_i = acc_bits.get(tail.input)
        if n_i is None:
            r = ranges[tail.input].int_range
            n_i = accmin.signed_width(int(np.min(r.lo)), int(np.max(r.hi)))
        shape = g.shape(tail.input)
        per_channel = any(g.constant(name).size > 1 for name in params)
        cfg = costmodel.TailConfig(
            n_i=n_i,
            n_p=max((f.W for f in formats.values()), default=1),
            n_o=q.quant_spec.bitwidth,
            C=shape[1] if len(shape) >= 2 else shape[0],
            PE=1,
            granularity="per_channel" if per_channel else "per_tensor",
        )
        entry = {"output": tail.output, "config": asdict(cfg)}
        entry.update(costmodel.recommend_tail(cfg).to_dict())
        entry["formats"] = {name: f.to_dict() for name, f in formats.items()}
        if pot:
            entry["pot"] = {name: costmodel.pot_flags(g.constant(name)) for name in sorted(params)}
        entries.append(entry)
    doc: Dict[str, Any] = {"tails": entries, "model_mre": dict(costmodel.MODEL_MRE)}
    if pot:
        doc["pot_note"] = POT_NOTE
    return doc


class Pipeline:
    """analyze -> streamline -> accmin -> [thresholdize] -> verify, writing one report per step"""

    def __init__(self, config: PipelineConfig):
        self.config = config

    def write(self, name: str, doc: Any) -> None:
        (self.config.out_dir / name).write_text(_dump(doc) + "\n")

    def run(self) -> int:
        cfg = self.config
        cfg.validate()
        original = load_graph(cfg.graph)
        input_ranges = load_ranges(cfg.ranges, original)

        if cfg.streamline:
            g, report = streamline(original, input_ranges, cfg.policy, seed=cfg.seed)
        else:
            g, report = lower(original), {"skipped": "streamlining disabled"}
        self.write("streamline.json", report)

        ranges = analyze(g, input_ranges)
        annotations = accmin.annotate(g, ranges)
        g = accmin.apply_annotations(g, annotations)
        self.write("accmin.json", accmin.report(annotations))
        self.write("cost.json", tail_costs(g, ranges, annotations, cfg.max_rel_err, cfg.pot))

        if cfg.thresholds:
            converter = ThresholdConverter()
            g = converter.run(g, ranges)
            self.write("thresholds.json", converter.report())
            ranges = analyze(g, input_ranges)

        save_graph(g, cfg.out_dir / "optimized.json")
        self.write("ranges.json", ranges.to_dict())

        verification = verify_ranges(g, ranges, n_samples=cfg.samples, seed=cfg.seed)
        doc = verification.to_dict()
        doc["max_rel_deviation"] = max_relative_deviation(
            original, g, input_ranges, min(cfg.samples, 1000), cfg.seed
        )
        self.write("verify.json", doc)

        logger.info("pipeline finished, %d range violation(s)", len(verification.violations))
        if not verification.ok:
            logger.error("error: %d range violation(s), see verify.json", len(verification.violations))
            return 1
        return 0


class SiraApplication:
    """Command-line front end: one subcommand per pass"""

    def __init__(self):
        self.parser = argparse.ArgumentParser(
            prog="sira", description="Scaled-integer range analysis and optimization of quantized graphs"
        )
        self.parser.add_argument("-v", "--verbose", action="count", default=0,
                                 help="more log output (repeatable)")
        self.commands = self.parser.add_subparsers(dest="command", required=True)

        sub = self.create_command("analyze", self.on_analyze, "range analysis report")
        sub.add_argument("-o", "--report", type=Path)

        sub = self.create_command("streamline", self.on_streamline, "aggregate scales and biases")
        sub.add_argument("-o", "--output", type=Path)
        sub.add_argument("--report", type=Path)
        sub.add_argument("--target-policy", choices=POLICIES, default="activation-feeding")
        sub.add_argument("--samples", type=int, default=256)
        sub.add_argument("--seed", type=int, default=0)

        sub = self.create_command("thresholdize", self.on_thresholdize, "convert layer tails to thresholds")
        sub.add_argument("-o", "--output", type=Path)
        sub.add_argument("--report", type=Path)
        sub.add_argument("--domain-cap", type=int, default=DOMAIN_CAP)

        sub = self.create_command("accmin", self.on_accmin, "accumulator width annotations")
        sub.add_argument("-o", "--output", type=Path, help="write the annotated graph here")
        sub.add_argument("--report", type=Path)

        sub = self.create_command("cost", self.on_cost, "layer tail cost model", graph=False)
        sub.add_argument("--n-i", type=int, default=16)
        sub.add_argument("--n-p", type=int, default=16)
        sub.add_argument("--n-o", type=int, default=4)
        sub.add_argument("--channels", type=int, default=64)
        sub.add_argument("--pe", type=int, default=1)
        sub.add_argument("--granularity", choices=costmodel.GRANULARITIES, default="per_channel")
        sub.add_argument("--params", type=float, nargs="+",
                         help="tail parameter values; n_p becomes the width of their fixed-point format")
        sub.add_argument("--pot", action="store_true", help="flag power-of-two values among --params")
        sub.add_argument("--max-rel-err", type=float, default=1e-3,
                         help="relative error bound for the --params fixed-point format")
        sub.add_argument("--sweep", type=parse_sweep, help="e.g. no=2..12; writes CSV")
        sub.add_argument("-o", "--output", type=Path)

        sub = self.create_command("verify", self.on_verify, "check ranges against sampled execution")
        sub.add_argument("--samples", type=int, default=10000)
        sub.add_argument("--seed", type=int, default=0)
        sub.add_argument("--report", type=Path)

        sub = self.create_command("run", self.on_run, "interpret the graph once", ranges=False)
        sub.add_argument("--inputs", type=Path, required=True, help="JSON object of input arrays")
        sub.add_argument("-o", "--output", type=Path)

        sub = self.create_command("pipeline", self.on_pipeline, "all passes with reports")
        sub.add_argument("--out-dir", type=Path, required=True)
        sub.add_argument("--thresholds", action="store_true")
        sub.add_argument("--no-streamline", action="store_true")
        sub.add_argument("--target-policy", choices=POLICIES, default="activation-feeding")
        sub.add_argument("--samples", type=int, default=10000)
        sub.add_argument("--seed", type=int, default=0)
        sub.add_argument("--pot", action="store_true", help="flag power-of-two parameters in cost.json")
        sub.add_argument("--max-rel-err", type=float, default=1e-3,
                         help="relative error bound for fixed-point parameter formats")

        sub = self.create_command("zoo", self.on_zoo, "export a bundled or random graph", graph=False)
        sub.add_argument("name", choices=sorted(MODELS) + sorted(RANDOM_MODELS))
        sub.add_argument("--seed", type=int, default=0)
        sub.add_argument("-o", "--output", type=Path)
        sub.add_argument("--ranges-out", type=Path)

    def create_command(self, name: str, callback, help: str, graph: bool = True,
                       ranges: bool = True) -> argparse.ArgumentParser:
        """Register a subcommand.

        Args:
            name: the subcommand name
            callback: called with the parsed arguments, returns the exit code
            graph: whether the command reads a graph document
            ranges: whether the command accepts ``--ranges``
        """
        sub = self.commands.add_parser(name, help=help)
        if graph:
            sub.add_argument("graph", type=Path)
        if graph and ranges:
            sub.add_argument("--ranges", type=Path)
        sub.set_defaults(callback=callback)
        return sub

    def _lowered(self, args):
        g = lower(load_graph(args.graph))
        return g, load_ranges(args.ranges, g)

    def on_analyze(self, args) -> int:
        g, inputs = self._lowered(args)
        _emit(analyze(g, inputs).to_json(), args.report)
        return 0

    def on_streamline(self, args) -> int:
        g = load_graph(args.graph)
        out, report = streamline(g, load_ranges(args.ranges, g), args.target_policy, args.samples, args.seed)
        _emit(out.to_json(), args.output)
        if args.report is not None:
            _emit(_dump(report), args.report)
        return 0

    def on_thresholdize(self, args) -> int:
        g, inputs = self._lowered(args)
        converter = ThresholdConverter(args.domain_cap)
        out = converter.run(g, analyze(g, inputs))
        _emit(out.to_json(), args.output)
        if args.report is not None:
            _emit(_dump(converter.report()), args.report)
        return 0

    def on_accmin(self, args) -> int:
        g, inputs = self._lowered(args)
        annotations = accmin.annotate(g, analyze(g, inputs))
        doc = _dump(accmin.report(annotations))
        if args.output is not None:
            save_graph(accmin.apply_annotations(g, annotations), args.output)
        _emit(doc, args.report)
        return 0

    def on_cost(self, args) -> int:
        if args.max_rel_err <= 0:
            raise SiraError(f"--max-rel-err must be positive, got {args.max_rel_err}")
        if args.pot and not args.params:
            raise SiraError("--pot needs --params")
        n_p, fmt = args.n_p, None
        if args.params:
            fmt = costmodel.fit_fixed_point(args.params, args.max_rel_err)
            n_p = fmt.W
        cfg = costmodel.TailConfig(args.n_i, n_p, args.n_o, args.channels, args.pe, args.granularity)
        if args.sweep is None:
            doc = costmodel.recommend_tail(cfg).to_dict()
            doc["config"] = asdict(cfg)
            if fmt is not None:
                doc["format"] = fmt.to_dict()
            if args.pot:
                doc["pot"] = costmodel.pot_flags(args.params)
                doc["pot_note"] = POT_NOTE
            _emit(_dump(doc), args.output)
            return 0
        if args.pot:
            logger.warning("--pot is ignored in sweep mode")
        rows = costmodel.sweep(cfg, *args.sweep)
        if args.output is None:
            costmodel.write_csv(rows, sys.stdout)
        else:
            with args.output.open("w", newline="") as f:
                costmodel.write_csv(rows, f)
        return 0

    def on_verify(self, args) -> int:
        g, inputs = self._lowered(args)
        report = verify_ranges(g, analyze(g, inputs), n_samples=args.samples, seed=args.seed)
        _emit(_dump(report.to_dict()), args.report)
        if not report.ok:
            logger.error("error: %d range violation(s)", len(report.violations))
            return 1
        return 0

    def on_run(self, args) -> int:
        g = load_graph(args.graph)
        doc = json.loads(args.inputs.read_text())
        if not isinstance(doc, dict):
            raise SiraError(f"input file {args.inputs} must hold a JSON object")
        values = run(g, {name: np.asarray(v, dtype=np.float64) for name, v in doc.items()})
        _emit(_dump({name: values[name].tolist() for name in g.outputs}), args.output)
        return 0

    def on_pipeline(self, args) -> int:
        config = PipelineConfig.from_args(args)
        code = Pipeline(config).run()
        _emit(f"wrote optimized graph and reports to {config.out_dir}", None)
        return code

    def on_zoo(self, args) -> int:
        if args.name in MODELS:
            g, ranges = MODELS[args.name](), fc_ranges()
        else:
            g, ranges = RANDOM_MODELS[args.name](np.random.default_rng(args.seed))
        _emit(g.to_json(), args.output)
        if args.ranges_out is not None:
            _emit(_dump({name: r.to_dict() for name, r in ranges.items()}), args.ranges_out)
        return 0

    def run(self, argv: Optional[Sequence[str]] = None) -> int:
        args = self.parser.parse_args(argv)
        setup_logging(verbose=args.verbose)
        try:
            return args.callback(args)
        except (SiraError, OSError, json.JSONDecodeError) as e:
            logger.error("error: %s", e)
            return 1


def main(argv: Optional[Sequence[str]] = None) -> int:
    """The application's entry point."""
    return SiraApplication().run(argv)


if __name__ == "__main__":
    sys.exit(main())
