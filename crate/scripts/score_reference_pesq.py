#!/usr/bin/env python3
"""Scores the rank-agreement conditions with the ITU-T P.862 reference
implementation (the `pesq` Python package, wideband mode) and freezes the
scores as JSON.

Usage:
    cargo run --release -p speechloss --example reference_conditions -- /tmp/conds
    python3 scripts/score_reference_pesq.py /tmp/conds > crates/cli/tests/data/reference_pesq.json
"""

import csv
import json
import sys

import numpy as np
from pesq import pesq
from scipy.io import wavfile


def read_float_wav(path):
    rate, data = wavfile.read(path)
    assert rate == 16000, path
    return np.asarray(data, dtype=np.float64)


def main():
    directory = sys.argv[1]
    out = []
    with open(f"{directory}/manifest.tsv") as f:
        for row in csv.DictReader(f, delimiter="\t"):
            clean = read_float_wav(row["clean"])
            degraded = read_float_wav(row["degraded"])
            out.append(
                {
                    "id": int(row["id"]),
                    "clean_seed": int(row["clean_seed"]),
                    "noise": row["noise"],
                    "snr_db": float(row["snr_db"]),
                    "degraded_sha256": row["sha256"],
                    "reference_pesq_wb": pesq(16000, clean, degraded, "wb"),
                }
            )
    json.dump(
        {
            "scorer": "pesq (PyPI) 0.0.4, ITU-T P.862.2 wideband, fs=16000",
            "conditions": out,
        },
        sys.stdout,
        indent=2,
    )
    sys.stdout.write("\n")


if __name__ == "__main__":
    main()
