#!/usr/bin/env python3
"""Regenerate all figure CSVs: curve grids, both bifurcation sweeps, sparsity.

Usage: make_figures.py [output_dir]   (default: figures/)
"""
import sys

from bidopt.cli import main as cli_main


def main() -> int:
    out = sys.argv[1] if len(sys.argv) > 1 else "figures"
    return cli_main(["figures", "all", "--output", out, "--seed", "0"])


if __name__ == "__main__":
    raise SystemExit(main())
