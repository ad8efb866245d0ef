"""Glue shared by the command line and the acceptance tests: suites, inference over splits, scoring."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from .data import Sequence, default_suite, generate_sequence
from .metrics import MetricsReport, evaluate
from .pipeline import InferenceSettings, StepOutput, run_sequence
from .tensor import ParamSet


def build_suite(num_train: int = 200, num_eval: int = 40, frames: int = 20, seed_offset: int = 0,
                threads: int = 1) -> tuple[list[Sequence], list[Sequence]]:
    train_specs, eval_specs = default_suite(num_train, num_eval, frames, seed_offset=seed_offset)
    specs = train_specs + eval_specs
    seqs = parallel_map(generate_sequence, specs, threads)
    for i, s in enumerate(seqs):
        s.name = f"seq_{i if i < num_train else i - num_train:04d}"
    return seqs[:num_train], seqs[num_train:]


def parallel_map(fn, items, threads: int = 1) -> list:
    """Order-preserving map; results do not depend on the thread count."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(threads) as pool:
        return list(pool.map(fn, items))


def infer_split(
    seqs: list[Sequence],
    scheme: str,
    params: ParamSet,
    settings: InferenceSettings = InferenceSettings(),
    threads: int = 1,
    record_embeddings: bool = False,
    keep_states: bool = False,
) -> list[tuple[list[StepOutput], list | None]]:
    def one(seq: Sequence):
        states = [] if keep_states else None
        outs = run_sequence(seq.frames, seq.masks[0], scheme, params, settings, seq.num_objects,
                            record_embeddings, states)
        return outs, states

    return parallel_map(one, seqs, threads)


@dataclass
class SplitScore:
    report: MetricsReport
    outputs: list[list[StepOutput]]


def score_split(
    seqs: list[Sequence],
    scheme: str,
    params: ParamSet,
    settings: InferenceSettings = InferenceSettings(),
    threads: int = 1,
) -> SplitScore:
    results = infer_split(seqs, scheme, params, settings, threads)
    report = MetricsReport()
    outputs = []
    for seq, (outs, _) in zip(seqs, results):
        report.extend(evaluate(outs, seq.masks, seq.num_objects, seq.name))
        outputs.append(outs)
    return SplitScore(report, outputs)
