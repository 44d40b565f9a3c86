"""Desk-scale strategy study: does the synthetic data reproduce the orderings
intra > inter-posture > inter-day, two-posture >= single-session and
five-day >= two-day?"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

from .dataio import SourceId
from .protocol import (
    Dataset,
    StrategySpec,
    TARGET_DAYS,
    compare,
    execute,
    plan_jobs,
    select,
    sort_cells,
)
from .simulation import GeneratorConfig, GestureProtocol, SourceVariabilityModel, synth_session
from .stats import aggregate
from .training import TrainConfig


def scaled_protocol():
    """Two repetitions of 1.5 s contractions: 996 windows per session."""
    return GestureProtocol(n_repetitions=2, contraction_s=1.5, rest_s=1.5)


def scaled_sources(n_subjects=2, n_days=5, n_postures=4, target_days=TARGET_DAYS, target_posture=1):
    """Full subject x day x posture grid plus the later target days for one posture."""
    grid = {SourceId(u, d, p) for u in range(1, n_subjects + 1)
            for d in range(1, n_days + 1) for p in range(1, n_postures + 1)}
    grid |= {SourceId(u, d, target_posture) for u in range(1, n_subjects + 1) for d in target_days}
    return sorted(grid)


def scaled_dataset(seed=0, sources=None, protocol=None, config: GeneratorConfig | None = None, pool_size=40):
    sources = sources or scaled_sources()
    protocol = protocol or scaled_protocol()
    models = {}
    recs = []
    for s in sources:
        if s.subject not in models:
            models[s.subject] = SourceVariabilityModel.generate(s.subject, seed, config)
        recs.append(synth_session(s, protocol, models[s.subject], pool_size, seed))
    return Dataset(recs, split_seed=seed)


def ordering_specs(reference_day=1, multi_day_posture=1):
    return [
        StrategySpec("single-session", days=(reference_day,), reference_day=reference_day),
        StrategySpec("two-posture", days=(reference_day,)),
        StrategySpec("two-day", postures=(multi_day_posture,)),
        StrategySpec("five-day", postures=(multi_day_posture,)),
    ]


@dataclass
class OrderingResult:
    cells: list
    means: dict = field(default_factory=dict)
    stats: dict = field(default_factory=dict)
    comparisons: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)

    def gap_ok(self, a, b, k=3.0):
        """Mean of ``a`` exceeds mean of ``b`` by more than ``k`` combined standard errors."""
        sa, sb = self.stats[a], self.stats[b]
        return sa.mean - sb.mean > k * math.hypot(sa.se, sb.se)


def run_ordering_study(dataset: Dataset, config: TrainConfig | None = None, seed=0, n_workers=1):
    config = config or TrainConfig()
    specs = ordering_specs()
    results = execute(dataset, plan_jobs(dataset.sources, specs), config, seed, n_workers, curves=False)
    cells = sort_cells(c for r in results for c in r.cells)
    out = OrderingResult(cells, failures=[(r.strategy, r.instance, r.fold, r.error) for r in results if r.error])

    single = select(cells, strategy="single-session")
    groups = {
        "intra": select(single, eval_kind="intra"),
        "inter-posture": select(single, eval_kind="inter-posture"),
        "inter-day": select(single, eval_kind="inter-day"),
        "two-posture inter-posture": select(cells, strategy="two-posture", eval_kind="inter-posture"),
    }
    # multi-day chain, all scored on the later target days
    late = set(TARGET_DAYS)
    multi = select(cells, eval_kind="inter-day", day=late)
    groups["D1"] = select(single, eval_kind="inter-day", day=late,
                          posture={c.posture for c in multi} or {1})
    for label in sorted({c.train_set for c in multi if c.strategy != "single-session"}):
        groups[label] = select(multi, train_set=label)
    for name, sub in groups.items():
        if sub:
            out.stats[name] = aggregate(sub)[()]
            out.means[name] = out.stats[name].mean

    two_day = [k for k in out.means if "+" in k and k.startswith("D")]
    five = [k for k in out.means if "-" in k and k.startswith("D")]
    if two_day and five:
        best = max(two_day, key=lambda k: out.means[k])
        out.comparisons["five-day vs best two-day"] = dict(
            best_two_day=best, **compare(groups[five[0]], groups[best], "inter-day"))
    return out


def summarize(result: OrderingResult):
    lines = []
    for name, st in result.stats.items():
        lines.append(f"{name:28s} {st.pm(2):>20s}  sigma={100 * st.std:5.2f}%  N={st.n}")
    for name, cmp in result.comparisons.items():
        lines.append(f"{name}: n={cmp['n']} p={cmp['p_value']:.4g} ({cmp['mean_a']:.4f} vs {cmp['mean_b']:.4f})")
    return "\n".join(lines)


def _main():
    import argparse
    import time

    ap = argparse.ArgumentParser(description="run the scaled ordering study")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=20)
    args = ap.parse_args()
    t = time.perf_counter()
    ds = scaled_dataset(args.seed)
    res = run_ordering_study(ds, TrainConfig(epochs=args.epochs, lr_step_size=max(1, args.epochs - 1)),
                             seed=args.seed)
    print(summarize(res))
    print(f"elapsed {time.perf_counter() - t:.0f}s, failures {len(res.failures)}")


if __name__ == "__main__":
    _main()
