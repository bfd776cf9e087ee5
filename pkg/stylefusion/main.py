"""Command-line entry point: validate a config, run one experiment, write reports."""
import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from pydantic import ValidationError

from . import __version__
from .core.config import get_settings
from .core.exceptions import ConfigValidationError, StyleFusionException, UsageError
from .core.logging import configure_logging
from .models.config import Command, CommandName, ExperimentConfig, OutputFormat
from .models.reports import BoundReport, RunManifest
from .services.attention import init_dit_weights, weights_to_json
from .services.pipeline import InpaintingPipeline
from .services.reflow import ReflowSampler, trajectory_frame
from .services.verification import PropositionSuite
from .utils.file_utils import (
    bound_frame, canonical_json, config_sha256, ensure_output_directory, experiment_frame,
    kappa_frame, save_frame, save_json, save_manifest, save_outputs,
)
from .utils.linalg import make_rng

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_BOUND_VIOLATION = 2

# Child stream used for the exported reflow trajectory
_TRAJECTORY_STREAM = 2


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    settings = get_settings()
    parser = _ArgumentParser(prog="stylefusion", description=settings.PROJECT_NAME)
    parser.add_argument("command", choices=[c.value for c in CommandName])
    parser.add_argument("--config", dest="config_path", help="JSON experiment config")
    parser.add_argument("--out", dest="out_dir", default=settings.OUTPUT_DIR, help="Report directory")
    parser.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
        help="Dot-path override, value parsed as JSON when possible (repeatable)",
    )
    parser.add_argument("--threads", type=int, default=settings.DEFAULT_THREADS, help="Worker threads, 0 = auto")
    parser.add_argument("--format", choices=[f.value for f in OutputFormat], default=settings.DEFAULT_FORMAT)
    parser.add_argument("--log-level", default=None, help="Overrides LOG_LEVEL")
    return parser


def parse_command(argv: Optional[Sequence[str]] = None) -> Tuple[Command, Optional[str]]:
    """Parse argv into a validated Command and the requested log level."""
    args = build_parser().parse_args(argv)
    try:
        command = Command(
            name=args.command,
            config_path=args.config_path,
            out_dir=args.out_dir,
            overrides=args.overrides,
            threads=args.threads,
            format=args.format,
        )
    except ValidationError as e:
        raise UsageError("; ".join(err["msg"] for err in e.errors()))
    return command, args.log_level


def _parse_override(text: str) -> Tuple[List[str], Any]:
    if "=" not in text:
        raise UsageError(f"--set expects KEY=VALUE, got {text!r}")
    key, raw = text.split("=", 1)
    path = [part for part in key.strip().split(".") if part]
    if not path:
        raise UsageError(f"--set has an empty key: {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return path, value


def apply_overrides(document: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """Patch ``document`` in place with dot-path ``key=value`` overrides."""
    for text in overrides:
        path, value = _parse_override(text)
        node = document
        for part in path[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise UsageError(f"--set {text!r}: {part} is not an object")
            node = child
        node[path[-1]] = value
    return document


def _pointer(location: Sequence[Any]) -> str:
    return "/" + "/".join(str(part) for part in location)


def validate_document(document: Any) -> ExperimentConfig:
    """Validate a parsed JSON document, mapping every schema error to a JSON pointer."""
    try:
        return ExperimentConfig.model_validate(document)
    except ValidationError as e:
        raise ConfigValidationError([(_pointer(err["loc"]), err["msg"]) for err in e.errors()])


def validate_config(path: str, overrides: Sequence[str] = ()) -> ExperimentConfig:
    """Read, patch and validate an experiment config; ``DSSI_SEED`` replaces the seed when set."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigValidationError([("", f"cannot read {path}: {e.strerror}")])
    try:
        document = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigValidationError([(f"line {e.lineno} column {e.colno}", e.msg)])
    if not isinstance(document, dict):
        raise ConfigValidationError([("", "config must be a JSON object")])
    apply_overrides(document, overrides)
    try:
        env_seed = get_settings().DSSI_SEED
    except ValidationError:
        raise UsageError("DSSI_SEED must be an integer")
    if env_seed is not None:
        document["seed"] = env_seed
    return validate_document(document)


def config_template() -> str:
    return canonical_json(ExperimentConfig(seed=1))


def _run_verify(config: ExperimentConfig, threads: int, out_dir: Path, fmt: OutputFormat, stem: str):
    reports = PropositionSuite(config.verification, config.seed, threads=threads).run()
    document = {"experiment": "verify-propositions", "seed": config.seed, "reports": [r.model_dump(mode="json") for r in reports]}
    return reports, save_outputs(out_dir, stem, bound_frame(reports), document, fmt)


def _save_weights(config: ExperimentConfig, out_dir: Path, stem: str) -> str:
    """Weight stack of the base seed, replayable with weights_from_json."""
    weights = init_dit_weights(config.d, config.layers, config.seed)
    return save_json(json.loads(weights_to_json(weights, seed=config.seed)), out_dir, f"{stem}_weights.json")


def _run_reflow(config: ExperimentConfig, out_dir: Path, fmt: OutputFormat, stem: str):
    sampler = ReflowSampler(config.reflow)
    reports = sampler.check(lambda k: make_rng(config.seed, k), seed=config.seed)
    document = {"experiment": "reflow-check", "seed": config.seed, "reports": [r.model_dump(mode="json") for r in reports]}
    written = save_outputs(out_dir, stem, bound_frame(reports), document, fmt)
    if fmt != OutputFormat.JSON:
        trajectory = sampler.sample(make_rng(config.seed, _TRAJECTORY_STREAM))
        written.append(save_frame(trajectory_frame(trajectory), out_dir, f"{stem}_trajectory"))
    return reports, written


def run(cmd: Command) -> int:
    """Execute one command; 0 on success, 2 when any bound is violated."""
    started = time.perf_counter()
    out_dir = ensure_output_directory(cmd.out_dir)
    stem = cmd.name.value.replace("-", "_")
    logger.info("%s: writing to %s", cmd.name.value, out_dir)

    if cmd.name == CommandName.EMIT_CONFIG_TEMPLATE:
        template = config_template()
        written = [save_json(json.loads(template), out_dir, "config_template.json")]
        sys.stdout.write(template)
        config = ExperimentConfig(seed=1)
        reports: List[BoundReport] = []
    else:
        config = validate_config(cmd.config_path, cmd.overrides)
        threads = cmd.threads
        if cmd.name == CommandName.VERIFY_PROPOSITIONS:
            reports, written = _run_verify(config, threads, out_dir, cmd.format, stem)
        elif cmd.name == CommandName.REFLOW_CHECK:
            reports, written = _run_reflow(config, out_dir, cmd.format, stem)
        else:
            reports = []
            pipeline = InpaintingPipeline(config, threads=threads)
            if cmd.name == CommandName.KAPPA_SWEEP:
                report = pipeline.kappa_sweep()
                frame = kappa_frame(report)
            elif cmd.name == CommandName.MODE_ABLATION:
                report = pipeline.mode_ablation()
                frame = experiment_frame(report)
            else:
                report = pipeline.mask_noise()
                frame = experiment_frame(report)
            written = save_outputs(out_dir, stem, frame, report, cmd.format)
            if cmd.format != OutputFormat.CSV:
                written.append(_save_weights(config, out_dir, stem))

    manifest = RunManifest(
        command=cmd.name.value,
        version=__version__,
        config_sha256=config_sha256(config),
        seed=config.seed,
        threads=cmd.threads,
        wall_time_s=time.perf_counter() - started,
        outputs=written,
    )
    written.append(save_manifest(manifest, out_dir))
    for path in written:
        logger.info("wrote %s", path)

    violated = [r for r in reports if not r.satisfied]
    for r in violated:
        logger.warning("bound violated: %s empirical=%.6g bound=%.6g (%s)", r.check_name, r.empirical, r.bound, r.detail)
    return EXIT_BOUND_VIOLATION if violated else EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        cmd, log_level = parse_command(argv)
        configure_logging(log_level)
        return run(cmd)
    except ConfigValidationError as e:
        for pointer, message in e.diagnostics:
            print(f"{pointer}: {message}", file=sys.stderr)
        return EXIT_ERROR
    except StyleFusionException as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
