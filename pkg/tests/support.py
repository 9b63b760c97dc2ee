"""Shared test helpers: wire-message strategy and small brute-force oracles."""
import itertools

import numpy as np
from hypothesis import strategies as st

from heteroforge.net import (
    CollectiveRequest,
    Empty,
    PullRequest,
    PullResponse,
    PushRequest,
    SampleRequest,
    SampleResponse,
    Verb,
    VectorResponse,
)

SPECIAL_F32 = np.array([0.0, -0.0, np.inf, -np.inf, np.nan, 1e-45, 3.4e38], dtype=np.float32)


def random_f32(rng, shape):
    vals = (rng.standard_normal(shape) * 10.0 ** rng.integers(-30, 30, shape)).astype(np.float32)
    special = rng.random(shape) < 0.1
    vals[special] = rng.choice(SPECIAL_F32, int(special.sum()))
    return vals


@st.composite
def messages(draw):
    """(verb, request, response) for a random verb; hypothesis picks shapes, numpy fills values."""
    verb = draw(st.sampled_from(list(Verb)))
    rng = np.random.default_rng(draw(st.integers(0, 2**32 - 1)))
    n = draw(st.integers(0, 40))
    w = draw(st.integers(0, 6))
    name = draw(st.text(max_size=12))
    big = lambda k: rng.integers(0, 2**63 - 1, k, dtype=np.int64)  # noqa: E731
    if verb == Verb.SAMPLE_NEIGHBORS:
        req = SampleRequest(draw(st.integers(0, 255)), draw(st.integers(0, 2**32 - 1)),
                            rng.integers(0, 2**64 - 1, n, dtype=np.uint64, endpoint=True),
                            (draw(st.integers(0, 2**64 - 1)), draw(st.integers(0, 2**64 - 1))))
        resp = SampleResponse(big(n), big(n), big(n))
    elif verb == Verb.PULL_DATA:
        req = PullRequest(name, big(n))
        resp = PullResponse(random_f32(rng, (n, w)))
    elif verb == Verb.PUSH_DATA:
        req = PushRequest(name, big(n), random_f32(rng, (n, w)))
        resp = Empty()
    elif verb in (Verb.BARRIER, Verb.ALLREDUCE):
        vals = random_f32(rng, n) if verb == Verb.ALLREDUCE else None
        req = CollectiveRequest(name, draw(st.integers(0, 2**64 - 1)), draw(st.integers(0, 2**32 - 1)),
                                draw(st.integers(0, 2**32 - 1)), vals)
        resp = Empty() if verb == Verb.BARRIER else VectorResponse(vals)
    else:
        req, resp = Empty(), Empty()
    return verb, req, resp


def same(a, b):
    assert type(a) is type(b)
    for k, v in vars(a).items():
        w = vars(b)[k]
        if isinstance(v, np.ndarray) or isinstance(w, np.ndarray):
            v, w = np.asarray(v), np.asarray(w)
            assert v.shape == w.shape and v.tobytes() == w.astype(v.dtype).tobytes(), k
        else:
            assert v == w, k


def brute_force_min_cut(src, dst, n):
    """Enumerate every 2-partition with exactly n/2 vertices per side."""
    best = None
    for left in itertools.combinations(range(n), n // 2):
        side = np.ones(n, dtype=np.int64)
        side[list(left)] = 0
        cut = int(np.sum(side[src] != side[dst]))
        best = cut if best is None else min(best, cut)
    return best
