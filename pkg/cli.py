# cli.py
"""
Experiment runner.

    python cli.py --config configs/mixing_linear_ar1.toml [--seed N] [--out DIR] [--threads N]

Exit status: 0 success, 1 numeric failure, 2 a certificate or verdict failed,
3 bad configuration. Verbosity comes from MIXLAB_LOG.
"""
import argparse
import sys
from typing import List, Optional

import numpy as np

from mixlab.errors import ConfigError, MixlabError
from orchestrator import run_flow
from utils.config import RunConfig, apply_overrides, load_config
from utils.logging_utils import configure_logging, get_logger

logger = get_logger(__name__)

EXIT_OK = 0
EXIT_NUMERIC = 1
EXIT_CERTIFICATE = 2
EXIT_CONFIG = ConfigError.exit_code


def run(config: RunConfig) -> int:
    """Execute the configured pipeline; returns the exit status."""
    try:
        state = run_flow(config)
    except MixlabError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return exc.exit_code
    except (ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
        logger.error("numeric failure: %s: %s", type(exc).__name__, exc)
        return EXIT_NUMERIC

    manifest = state["manifest"]
    failed = sorted(name for name, ok in manifest.verdicts.items() if not ok)
    print(f"\n📂 {config.command}: {len(manifest.files)} files -> {state['manifest_path']}")
    for name, ok in sorted(manifest.verdicts.items()):
        print(f"   {'✅' if ok else '❌'} {name}")
    if failed:
        logger.warning("failed verdicts: %s", ", ".join(failed))
        return EXIT_CERTIFICATE
    return EXIT_OK


def parse_args(argv: Optional[List[str]] = None) -> argparse.Namespace:
    p = argparse.ArgumentParser(prog="mixlab", description="Markovian reduction and mixing experiments")
    p.add_argument("--config", required=True, help="TOML run configuration")
    p.add_argument("--seed", type=int, default=None, help="root seed (overrides the config)")
    p.add_argument("--out", default=None, help="output directory (overrides the config)")
    p.add_argument("--threads", type=int, default=None, help="worker threads (overrides the config)")
    return p.parse_args(argv)


def main(argv: Optional[List[str]] = None) -> int:
    configure_logging()
    args = parse_args(argv)
    try:
        config = apply_overrides(load_config(args.config), seed=args.seed, output_dir=args.out,
                                 threads=args.threads)
    except ConfigError as exc:
        logger.error("%s", exc)
        return EXIT_CONFIG
    return run(config)


__all__ = ["run", "main", "parse_args"]


if __name__ == "__main__":
    sys.exit(main())
