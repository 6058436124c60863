"""
Command-line entry point: run experiments, print bit budgets, and encode or
decode single payloads.

Exit codes: 0 success, 1 other library error, 2 configuration or usage error,
3 diverged, 4 malformed payload.
"""
import argparse
import io
import logging
import sys
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pydantic
from pydantic import ConfigDict

from .__version__ import __version__
from .codec import EncodedPayload, bit_budget, decode_payload, encode_payload, measured_bit_budget
from .compressors import SparseUpdate
from .config import QuantizerSpec, RuntimeConfig, load_experiment_config
from .exceptions import (
    ConfigurationError,
    DatasetFormatError,
    DivergedError,
    MalformedPayloadError,
    OutputExistsError,
    TCSFedsimError,
)
from .fedsim import run_experiment
from .tensor import LayerLayout, Mask
from .utils import (
    atomic_directory,
    current_datetime,
    setup_logging,
    version_stamp,
    write_bytes_atomic,
    write_text_atomic,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_MALFORMED = 4

# Parameter count of the full-scale reference network, used for the log2(d) variant
REFERENCE_DIM = 11_173_962


class RunManifest(pydantic.BaseModel):
    """Provenance of one ``run`` output directory"""

    model_config = ConfigDict(extra="forbid")

    config_path: str
    output_dir: str
    config: Dict[str, Any]
    version: str
    seed: int
    created_at: datetime


# (label, scheme, q, phi_global, phi_local, H)
BUDGET_TABLE = [
    ("TCS", "tcs", 32, 0.01, 0.001, 1),
    ("TCS-L2", "tcs", 32, 0.01, 0.001, 2),
    ("TCS-L4", "tcs", 32, 0.01, 0.001, 4),
    ("TCS-Q5", "tcs", 5, 0.01, 0.001, 1),
    ("TCS-L4-Q5", "tcs", 5, 0.01, 0.001, 4),
    ("TCS-LF-Q5", "tcs", 5, 0.01, 0.001, 1),
    ("top-K", "topk", 32, 0.01, 0.0, 1),
    ("top-K-Q5", "topk", 5, 0.01, 0.0, 1),
    ("rand-K", "randk", 32, 0.01, 0.0, 1),
]


def _read_values(path: str) -> np.ndarray:
    try:
        lines = Path(path).read_text(encoding="utf-8").split()
        return np.asarray([float(v) for v in lines], dtype=np.float64)
    except (OSError, ValueError) as e:
        raise DatasetFormatError(f"cannot read values from {path}: {e}") from e


def _read_indices(path: Optional[str], d: int) -> Mask:
    layout = LayerLayout.single(d)
    if path is None:
        return Mask.empty(layout)
    try:
        indices = [int(v) for v in Path(path).read_text(encoding="utf-8").split()]
    except (OSError, ValueError) as e:
        raise DatasetFormatError(f"cannot read mask indices from {path}: {e}") from e
    return Mask.from_unsorted(indices, layout)


def _format_values(values: np.ndarray) -> str:
    buf = io.StringIO()
    for v in values.tolist():
        buf.write(f"{v!r}\n")
    return buf.getvalue()


def cmd_run(args: argparse.Namespace) -> int:
    overrides: List[str] = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    cfg = load_experiment_config(args.config, overrides)
    runtime = RuntimeConfig()

    with atomic_directory(args.out, force=args.force) as staging:
        log = run_experiment(cfg, runtime)
        log.write_csv(staging / "metrics.csv")
        np.save(staging / "final_model.npy", log.final_params.values)
        (staging / "resolved_config.json").write_text(cfg.model_dump_json(indent=2) + "\n", encoding="utf-8")
        manifest = RunManifest(
            config_path=str(args.config),
            output_dir=str(args.out),
            config=cfg.model_dump(mode="json"),
            version=version_stamp(),
            seed=cfg.seed,
            created_at=current_datetime(),
        )
        (staging / "manifest.json").write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")
    print(f"{len(log)} rounds, final test accuracy {log.last.test_accuracy:.4f}, wrote {args.out}")
    return EXIT_OK


def cmd_budget(args: argparse.Namespace) -> int:
    if args.table:
        rows = BUDGET_TABLE
    else:
        rows = [("custom", args.scheme, args.q, args.phi_global, args.phi_local, args.local_steps)]

    header = f"{'scheme':<12}{'H':>3}{'q':>4}{'phi_g':>9}{'phi_l':>9}{'block':>11}{'log2d':>11}"
    if args.measured:
        header += f"{'measured':>11}"
    print(header)
    for label, scheme, q, phi_g, phi_l, h in rows:
        block = bit_budget(scheme, q, phi_g, phi_l, h)
        log2d = bit_budget(scheme, q, phi_g, phi_l, h, d=args.dim, position_coding="log2d")
        line = f"{label:<12}{h:>3}{q:>4}{phi_g:>9.4g}{phi_l:>9.4g}{block:>11.5f}{log2d:>11.5f}"
        if args.measured:
            spec = QuantizerSpec("none") if q == 32 else QuantizerSpec("fractional", 1 << (q - 1))
            line += f"{measured_bit_budget(scheme, spec, phi_g, phi_l, h, args.dim, args.seed or 0):>11.5f}"
        print(line)
    return EXIT_OK


def cmd_encode(args: argparse.Namespace) -> int:
    values = _read_values(args.values)
    layout = LayerLayout.single(values.size)
    m_global = _read_indices(args.mask, values.size)
    is_global = m_global.to_dense().astype(bool)
    local = np.flatnonzero((values != 0) & ~is_global)
    su = SparseUpdate(layout, m_global.indices, values[m_global.indices], local, values[local])
    spec = QuantizerSpec(args.quantizer, args.levels or 0)
    payload = encode_payload(su, spec, args.phi, round=args.round)
    write_bytes_atomic(args.out, payload.to_bytes())
    print(f"{payload.bit_length} bits ({su.k_global} global, {su.k_local} local values)")
    return EXIT_OK


def cmd_decode(args: argparse.Namespace) -> int:
    try:
        raw = Path(args.payload).read_bytes()
    except OSError as e:
        raise DatasetFormatError(f"cannot read payload {args.payload}: {e}") from e
    payload = EncodedPayload.from_bytes(raw)
    su = decode_payload(payload, _read_indices(args.mask, payload.d))
    write_text_atomic(args.out, _format_values(su.to_dense().values))
    print(f"decoded {su.support_size} values of d={payload.d}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tcs-fedsim", description="Federated learning simulator with time-correlated sparsification"
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument(
        "--log-level", default=None, help="DEBUG, INFO, WARNING, ERROR (default: TCS_LOG_LEVEL or INFO)"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one configured experiment")
    run.add_argument("--config", required=True, help="experiment config (key = value lines or JSON)")
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--seed", type=int, default=None, help="override the config seed")
    run.add_argument("--force", action="store_true", help="replace an existing output directory")
    run.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config field")
    run.set_defaults(handler=cmd_run)

    budget = sub.add_parser("budget", help="uplink bits per parameter per iteration")
    budget.add_argument("--scheme", choices=["tcs", "topk", "randk", "dense"], default="tcs")
    budget.add_argument("--q", type=int, default=32, help="bits per value")
    budget.add_argument("--phi-global", type=float, default=0.01)
    budget.add_argument("--phi-local", type=float, default=0.001)
    budget.add_argument("--local-steps", "-H", type=int, default=1)
    budget.add_argument("--dim", type=int, default=REFERENCE_DIM, help="model dimension d")
    budget.add_argument("--table", action="store_true", help="print the standard scheme table")
    budget.add_argument("--measured", action="store_true", help="also encode a random payload and count its bits")
    budget.add_argument("--seed", type=int, default=None)
    budget.set_defaults(handler=cmd_budget)

    encode = sub.add_parser("encode", help="encode a dense values file into a payload")
    encode.add_argument("--values", required=True, help="one float per line")
    encode.add_argument("--mask", default=None, help="global mask indices, one per line")
    encode.add_argument("--out", required=True)
    encode.add_argument("--phi", type=float, default=0.0, help="local ratio that sets the block size")
    encode.add_argument("--quantizer", choices=["none", "scaled_sign", "fractional"], default="none")
    encode.add_argument("--levels", type=int, default=None, help="P for the fractional quantizer")
    encode.add_argument("--round", type=int, default=0)
    encode.set_defaults(handler=cmd_encode)

    decode = sub.add_parser("decode", help="decode a payload into a dense values file")
    decode.add_argument("--payload", required=True)
    decode.add_argument("--mask", default=None, help="global mask indices, one per line")
    decode.add_argument("--out", required=True)
    decode.set_defaults(handler=cmd_decode)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        runtime = RuntimeConfig(log_level=args.log_level) if args.log_level else RuntimeConfig()
        setup_logging(runtime.log_level)
        return args.handler(args)
    except (ConfigurationError, OutputExistsError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergedError as e:
        print(f"error: diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except MalformedPayloadError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MALFORMED
    except TCSFedsimError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
