#!/usr/bin/env python3
"""SSE of the flat-line predictor on a cohort.

The flat-line predictor ignores time entirely and predicts one constant
vector (the mean observation) for every scan. Any trajectory model worth
keeping should beat this number on held-out subjects.
"""

import argparse

import numpy as np

from trajmoe.cohort import read_cohort_jsonl


def flatline_sse(subjects, reference=None):
    ref = reference if reference is not None else subjects
    mean = np.concatenate([s.obs for s in ref], axis=0).mean(axis=0)
    total = 0.0
    for s in subjects:
        d = s.obs - mean[None, :]
        total += float((d * d).sum())
    return total


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("cohort", help="cohort JSONL to score")
    p.add_argument("--fit-cohort", default=None,
                   help="cohort the constant is estimated from (default: the scored one)")
    args = p.parse_args()
    subjects = read_cohort_jsonl(args.cohort)
    reference = read_cohort_jsonl(args.fit_cohort) if args.fit_cohort else None
    print(repr(flatline_sse(subjects, reference)))


if __name__ == "__main__":
    main()
