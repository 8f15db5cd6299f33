import itertools
import math
from functools import lru_cache

import numpy as np
import pytest

from tdsearch.tensor import EinsumSpec

LETTERS = "abcdefgh"


def random_spec(rng, max_operands=5, max_extent=4, max_letters=6) -> EinsumSpec:
    """Random einsum with 2..max_operands operands and no repeated letters per operand."""
    n_ops = int(rng.integers(2, max_operands + 1))
    n_letters = int(rng.integers(1, max_letters + 1))
    pool = LETTERS[:n_letters]
    extents = {c: int(rng.integers(1, max_extent + 1)) for c in pool}
    inputs = []
    for _ in range(n_ops):
        k = int(rng.integers(0, min(3, n_letters) + 1))
        inputs.append("".join(sorted(rng.choice(list(pool), size=k, replace=False))))
    used = sorted(set("".join(inputs)))
    out = "".join(c for c in used if rng.random() < 0.4)
    out = "".join(rng.permutation(list(out))) if out else ""
    return EinsumSpec(tuple(inputs), out, {c: extents[c] for c in used})


def random_operands(spec, rng):
    return [rng.standard_normal(spec.shape_of(s)) for s in spec.inputs]


def loop_einsum(spec, operands):
    """Literal nested summation over every index assignment."""
    letters = sorted(set("".join(spec.inputs)))
    out = np.zeros(spec.shape_of(spec.output))
    for values in itertools.product(*[range(spec.extents[c]) for c in letters]):
        env = dict(zip(letters, values))
        term = 1.0
        for subs, op in zip(spec.inputs, operands):
            term *= op[tuple(env[c] for c in subs)]
        out[tuple(env[c] for c in spec.output)] += term
    return out


def brute_force_min_macs(spec) -> int:
    """Minimum total MACs over every binary contraction order, by exhaustive recursion."""
    n = len(spec.inputs)
    subs = [frozenset(s) for s in spec.inputs]

    def letters_of(group, remaining):
        if len(group) == 1:
            # a leaf enters its first contraction with all of its letters
            return subs[next(iter(group))]
        mine = set().union(*(subs[i] for i in group))
        others = set(spec.output).union(*(subs[i] for g in remaining if g != group for i in g))
        return frozenset(mine & others)

    @lru_cache(maxsize=None)
    def best(state):
        groups = list(state)
        if len(groups) == 1:
            return 0
        out = math.inf
        for a, b in itertools.combinations(range(len(groups)), 2):
            ga, gb = groups[a], groups[b]
            la = letters_of(ga, state)
            lb = letters_of(gb, state)
            macs = math.prod(spec.extents[c] for c in la | lb)
            merged = ga | gb
            rest = frozenset(g for k, g in enumerate(groups) if k not in (a, b)) | {merged}
            out = min(out, macs + best(rest))
        return out

    return best(frozenset(frozenset([i]) for i in range(n)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_RESULTS: list[tuple[int, str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok, detail in sorted(ACCEPTANCE_RESULTS):
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"{status} criterion {number:2d}: {title} ({detail})")
