"""``reconstruct`` command line entry point."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, PipelineConfig
from .pipeline import run_pipeline


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="reconstruct",
                                description="Rebuild an interactive, simulatable scene from segmented scans and a CAD database.")
    p.add_argument("--scene", help="entity manifest or frame-stream manifest (file or directory)")
    p.add_argument("--cad-db", help="CAD database directory")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--top-k", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--config", help="JSON or YAML configuration file")
    p.add_argument("--dump-matching", action="store_true", default=None, help="write per-entity matching CSVs")
    p.add_argument("--trace-lm", action="store_true", default=None, help="write per-candidate LM traces")
    p.add_argument("--urdf-compat", action="store_true", default=None,
                   help="emit fixed joints plus a sidecar list instead of floating joints")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
        overrides = {"scene": args.scene, "cad_db": args.cad_db, "out": args.out, "seed": args.seed,
                     "top_k": args.top_k, "jobs": args.jobs, "dump_matching": args.dump_matching,
                     "trace_lm": args.trace_lm, "urdf_compat": args.urdf_compat}
        cfg = cfg.replace(**{k: v for k, v in overrides.items() if v is not None})
    except (ConfigError, OSError, ValueError) as exc:
        logging.getLogger("reconstruct").error("invalid configuration: %s", exc)
        return 1
    missing = [name for name in ("scene", "cad_db", "out") if getattr(cfg, name) is None]
    if missing:
        logging.getLogger("reconstruct").error("missing required setting(s): %s", ", ".join(missing))
        return 1
    return run_pipeline(cfg).exit_code


if __name__ == "__main__":
    sys.exit(main())
