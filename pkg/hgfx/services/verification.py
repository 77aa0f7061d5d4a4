"""Oracle and invariant suite run by ``hgfx verify``.

Each check draws from its own seeded generator and returns (passed, detail).
"""

import itertools
import logging
import math
import time
from collections.abc import Callable
from decimal import Decimal, localcontext

import numpy as np

from hgfx.config import ModelConfig
from hgfx.errors import ConfigError, HGFXError
from hgfx.models import CheckResult
from hgfx.services.adaptive_scan import (
    SimilarityGraph,
    consecutive_similarity,
    local_window_order,
    max_spanning_tree,
    pairwise_similarity,
    plan_scan,
    raster_order,
)
from hgfx.services.cross_modal import MappingParams, cross_modal_correlation, hetero_correlation
from hgfx.services.gradcheck import check_function, check_gradients
from hgfx.services.graph_reason import HeteroGraphNet
from hgfx.services.hetero_graph import adaptive_adjacency, knn_adjacency
from hgfx.services.patch_embed import PatchEmbedding
from hgfx.services.ssm_encoder import DiscreteSSM, ssm_recurrence, zoh_discretize
from hgfx.tensor import (
    Tensor,
    amax,
    concat,
    cross_entropy,
    exp,
    expm1_ratio,
    gather_rows,
    leaky_relu,
    log,
    log_softmax_lastdim,
    mean,
    reshape,
    scatter_rows,
    softmax_lastdim,
    softplus,
    stack,
    sum,
    take_lastdim,
    transpose,
)

logger = logging.getLogger(__name__)

Check = Callable[[np.random.Generator], tuple[bool, str]]


# --- adaptive-scan ---


def _spanning_tree_weight_bruteforce(w: np.ndarray) -> float:
    n = w.shape[0]
    if n == 1:
        return 0.0
    edges = list(itertools.combinations(range(n), 2))
    best = -math.inf
    for subset in itertools.combinations(edges, n - 1):
        parent = list(range(n))

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        acyclic = True
        for i, j in subset:
            ri, rj = find(i), find(j)
            if ri == rj:
                acyclic = False
                break
            parent[ri] = rj
        if acyclic:
            best = max(best, math.fsum(w[i, j] for i, j in subset))
    return best


def check_mst_enumeration(rng: np.random.Generator, trials: int = 200, max_n: int = 6) -> tuple[bool, str]:
    for trial in range(trials):
        n = int(rng.integers(1, max_n + 1))
        upper = np.triu(rng.uniform(0.1, 10.0, size=(n, n)), 1)
        w = upper + upper.T
        edges = max_spanning_tree(SimilarityGraph(w))
        got = math.fsum(w[i, j] for i, j in edges)
        want = _spanning_tree_weight_bruteforce(w)
        if len(edges) != n - 1 or not math.isclose(got, want, rel_tol=1e-12, abs_tol=0.0):
            return False, f"trial {trial} (N={n}): tree weight {got!r}, enumeration {want!r}"
    return True, f"{trials} random complete graphs"


def check_scan_equivariance(rng: np.random.Generator, trials: int = 50, n: int = 9) -> tuple[bool, str]:
    for trial in range(trials):
        x = rng.normal(size=(n, 4))
        # relabel everything but the root
        perm = np.concatenate([[0], 1 + rng.permutation(n - 1)])
        inv = np.argsort(perm)
        a, b = plan_scan(x), plan_scan(x[perm])
        relabeled = {tuple(sorted((int(inv[i]), int(inv[j])))) for i, j in a.tree_edges}
        if relabeled != set(b.tree_edges):
            return False, f"trial {trial}: tree is not relabeled consistently"
        if not np.array_equal(perm[b.order], a.order):
            return False, f"trial {trial}: scan order is not relabeled consistently"
    return True, f"{trials} relabelings of {n} nodes"


def region_image(
    rng: np.random.Generator, size: int = 32, patch_size: int = 4, regions: int = 4, noise: float = 0.05
) -> np.ndarray:
    """(size, size, 3) image of a few flat-coloured regions, each a contiguous set of whole patches."""
    grid = size // patch_size
    seeds = rng.integers(0, grid, size=(regions, 2))
    rows, cols = np.divmod(np.arange(grid * grid), grid)
    dist = (rows[:, None] - seeds[None, :, 0]) ** 2 + (cols[:, None] - seeds[None, :, 1]) ** 2
    region = np.argmin(dist, axis=1).reshape(grid, grid)
    colours = rng.uniform(0.0, 1.0, size=(regions, 3))
    pixels = np.repeat(np.repeat(colours[region], patch_size, axis=0), patch_size, axis=1)
    return np.clip(pixels + rng.normal(0.0, noise, size=pixels.shape), 0.0, 1.0)


def clustered_nodes(rng: np.random.Generator, size: int = 32, patch_size: int = 4, dim: int = 16) -> np.ndarray:
    """Patch embeddings (N, dim) of a :func:`region_image` under a freshly initialised embedding."""
    embed = PatchEmbedding(size, 3, patch_size, dim, rng)
    return embed(region_image(rng, size, patch_size)).features.data


def check_consecutive_similarity(
    rng: np.random.Generator, trials: int = 50, size: int = 32, patch_size: int = 4, window: int = 2
) -> tuple[bool, str]:
    grid = size // patch_size
    baselines = {"raster": raster_order(grid * grid), "local-window": local_window_order(grid, grid, window)}
    adaptive = []
    scores: dict[str, list[float]] = {name: [] for name in baselines}
    for _ in range(trials):
        x = clustered_nodes(rng, size, patch_size)
        g = pairwise_similarity(x)
        adaptive.append(consecutive_similarity(g, plan_scan(x).order))
        for name, order in baselines.items():
            scores[name].append(consecutive_similarity(g, order))
    a = float(np.mean(adaptive))
    means = {name: float(np.mean(s)) for name, s in scores.items()}
    wins = int(np.sum(np.asarray(adaptive) >= np.asarray(scores["raster"])))
    detail = f"mean consecutive similarity adaptive {a:.4f}, " + ", ".join(
        f"{name} {m:.4f}" for name, m in means.items()
    ) + f" ({wins}/{trials} wins over raster)"
    return all(a >= m for m in means.values()), detail


# --- ssm-encoder ---


def _zoh_oracle(a: float, b: float, dt: float) -> tuple[float, float]:
    with localcontext() as ctx:
        ctx.prec = 50
        dA = Decimal(dt) * Decimal(a)
        a_bar = dA.exp()
        b_bar = Decimal(dt) * Decimal(b) if dA == 0 else (a_bar - 1) / dA * Decimal(dt) * Decimal(b)
        return float(a_bar), float(b_bar)


def check_zoh(rng: np.random.Generator, d: int = 6, s: int = 5) -> tuple[bool, str]:
    A = -rng.uniform(0.05, 5.0, size=(d, s))
    B = rng.normal(size=(d, s))
    dt = rng.uniform(1e-3, 1.0, size=d)
    disc = zoh_discretize(Tensor(A), Tensor(B), Tensor(dt))
    worst = 0.0
    for i in range(d):
        for j in range(s):
            a_bar, b_bar = _zoh_oracle(A[i, j], B[i, j], dt[i])
            worst = max(
                worst,
                abs(disc.A_bar.data[i, j] - a_bar) / abs(a_bar),
                abs(disc.B_bar.data[i, j] - b_bar) / abs(b_bar),
            )
    if worst > 1e-12:
        return False, f"relative error {worst:.3g} against the 50-digit oracle"

    limit = zoh_discretize(Tensor(np.zeros((1, 3))), Tensor([[1.0, -2.0, 0.5]]), Tensor([0.25]))
    if not (np.array_equal(limit.A_bar.data, np.ones((1, 3))) and np.allclose(limit.B_bar.data, [[0.25, -0.5, 0.125]], rtol=0, atol=1e-15)):
        return False, "A -> 0 limit does not give A_bar = 1, B_bar = delta * B"
    half = zoh_discretize(Tensor([[-1.0]]), Tensor([[1.0]]), Tensor([math.log(2.0)]))
    if abs(half.A_bar.item() - 0.5) > 1e-15 or abs(half.B_bar.item() - 0.5) > 1e-15:
        return False, f"A=-1, delta=ln 2 gives ({half.A_bar.item()}, {half.B_bar.item()}), expected (0.5, 0.5)"
    return True, f"max relative error {worst:.3g}"


def check_recurrence(rng: np.random.Generator, trials: int = 20, d: int = 3, s: int = 4) -> tuple[bool, str]:
    worst = 0.0
    for _ in range(trials):
        length = int(rng.integers(1, 33))
        a_bar = rng.uniform(0.0, 0.99, size=(d, s))
        b_bar = rng.normal(size=(d, s))
        c = rng.normal(size=(d, s))
        x = rng.normal(size=(length, d))
        y = ssm_recurrence(DiscreteSSM(Tensor(a_bar), Tensor(b_bar)), Tensor(c), Tensor(x)).data
        expected = x.copy()
        for j in range(length):
            for m in range(j + 1):
                expected[j] += np.sum(c * a_bar ** (j - m) * b_bar, axis=-1) * x[m]
        worst = max(worst, float(np.max(np.abs(y - expected))))
    return worst <= 1e-10, f"max deviation from the unrolled sum {worst:.3g}"


# --- hetero-graph ---


def _ranked(scores: list[float], k: int, dilation: int) -> list[int]:
    order = sorted(range(len(scores)), key=lambda j: (scores[j], j))
    return order[: k * dilation : dilation]


def _euclid(a, b) -> float:
    return math.sqrt(math.fsum((x - y) ** 2 for x, y in zip(a, b)))


def check_adjacency(rng: np.random.Generator, trials: int = 200, max_n: int = 10) -> tuple[bool, str]:
    for trial in range(trials):
        n = int(rng.integers(1, max_n + 1))
        dim = int(rng.integers(1, 5))
        dilation = int(rng.integers(1, n + 1))
        k = int(rng.integers(1, n // dilation + 1))
        V_v, V_s = rng.normal(size=(n, dim)), rng.normal(size=(n, dim))
        logits = rng.normal(size=(n, n))
        H = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        knn = knn_adjacency(V_v, V_s, k, dilation).idx
        ada = adaptive_adjacency(H, V_v, V_s, k, dilation).idx
        for i in range(n):
            dist = [_euclid(V_v[i], V_s[j]) for j in range(n)]
            if knn[i].tolist() != _ranked(dist, k, dilation):
                return False, f"trial {trial}: knn row {i} differs from the full sort"
            if ada[i].tolist() != _ranked([-(H[i, j] * -dist[j]) for j in range(n)], k, dilation):
                return False, f"trial {trial}: adaptive row {i} differs from the full sort"
    return True, f"{trials} random instances"


# --- cross-modal ---


def check_normalization(rng: np.random.Generator, trials: int = 10) -> tuple[bool, str]:
    for trial in range(trials):
        n, dim, mapped = int(rng.integers(2, 10)), int(rng.integers(2, 9)), int(rng.integers(2, 9))
        params = MappingParams(dim, mapped, rng)
        res = cross_modal_correlation(Tensor(rng.normal(size=(n, dim))), Tensor(rng.normal(size=(n, dim))), params)
        if np.max(np.abs(res.alpha.data.sum(axis=-1) - 1.0)) > 1e-6:
            return False, f"trial {trial}: alpha rows don't sum to 1"
        if np.max(np.abs(res.H.data.sum(axis=-1) - 1.0)) > 1e-6 or np.any(res.H.data <= 0):
            return False, f"trial {trial}: H is not a positive row-stochastic matrix"
        softmax = np.exp(res.alpha.data) / np.exp(res.alpha.data).sum(axis=-1, keepdims=True)
        if np.max(np.abs(res.H.data - softmax)) > 1e-12:
            return False, f"trial {trial}: H differs from softmax(alpha) on nonnegative alpha"
        alpha = np.abs(rng.normal(size=(n, n)))
        direct = np.exp(alpha) / np.exp(alpha).sum(axis=-1, keepdims=True)
        if np.max(np.abs(hetero_correlation(Tensor(alpha)).data - direct)) > 1e-12:
            return False, f"trial {trial}: hetero_correlation differs from softmax on a nonnegative matrix"
    return True, f"{trials} random node sets"


# --- tensor-core ---


def primitive_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[..., Tensor], list[np.ndarray]]]:
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    positive = rng.uniform(0.5, 2.0, size=(3, 4))
    idx = np.array([[0, 2], [1, 1], [3, 0]])
    perm = np.array([2, 0, 3, 1])
    return {
        "add": (lambda x, y: x + y, [a, rng.normal(size=(4,))]),
        "sub": (lambda x, y: x - y, [a, b]),
        "mul": (lambda x, y: x * y, [a, rng.normal(size=(3, 1))]),
        "div": (lambda x, y: x / y, [a, positive]),
        "pow": (lambda x: x**3, [a]),
        "matmul": (lambda x, y: x @ y, [a, rng.normal(size=(4, 2))]),
        "exp": (exp, [a]),
        "log": (log, [positive]),
        "leaky_relu": (lambda x: leaky_relu(x, 0.2), [a + np.sign(a) * 0.05]),
        "softplus": (softplus, [a]),
        "expm1_ratio": (expm1_ratio, [a + np.sign(a) * 0.05]),
        "sum": (lambda x: sum(x, axis=0), [a]),
        "mean": (lambda x: mean(x, axis=-1, keepdims=True), [a]),
        "amax": (lambda x: amax(x, axis=-1), [np.arange(12.0).reshape(3, 4) * 0.1 + rng.permutation(12).reshape(3, 4)]),
        "reshape": (lambda x: reshape(x, (2, 6)), [a]),
        "transpose": (transpose, [a]),
        "concat": (lambda x, y: concat([x, y], axis=-1), [a, b]),
        "stack": (lambda x, y: stack([x, y], axis=1), [a, b]),
        "index": (lambda x: x[(slice(None), 1)], [a]),
        "gather_rows": (lambda x: gather_rows(x, idx), [rng.normal(size=(4, 2))]),
        "scatter_rows": (lambda x: scatter_rows(x, perm), [rng.normal(size=(4, 3))]),
        "take_lastdim": (lambda x: take_lastdim(x, idx), [rng.normal(size=(3, 4))]),
        "softmax": (softmax_lastdim, [a]),
        "log_softmax": (log_softmax_lastdim, [a]),
        "cross_entropy": (lambda x: cross_entropy(x, [1, 0, 3]), [a]),
    }


def check_primitive_gradients(rng: np.random.Generator, tolerance: float = 1e-6) -> tuple[bool, str]:
    errors = {name: check_function(fn, inputs) for name, (fn, inputs) in primitive_cases(rng).items()}
    worst = max(errors, key=errors.get)
    failing = [name for name, err in errors.items() if err > tolerance]
    if failing:
        return False, "above tolerance: " + ", ".join(f"{n} ({errors[n]:.3g})" for n in failing)
    return True, f"{len(errors)} primitives, worst {worst} at {errors[worst]:.3g}"


TINY_MODEL = ModelConfig(
    image_size=8, channels=3, patch_size=4, dim=8, mapped_dim=8, state_dim=4,
    k=2, dilation=1, blocks=2, dropout=0.0, dtype="float64",
)


def check_end_to_end_gradients(rng: np.random.Generator, tolerance: float = 1e-3, samples: int = 8) -> tuple[bool, str]:
    model = HeteroGraphNet(TINY_MODEL, seed=int(rng.integers(1 << 31)))
    pixels = rng.uniform(0.0, 1.0, size=(2, 8, 8, 3))
    labels = np.array([0, 1])

    def loss_fn() -> Tensor:
        return cross_entropy(model(pixels), labels)

    errors = check_gradients(loss_fn, model.active_named_parameters(), h=1e-6, samples=samples, rng=rng)
    worst = max(errors, key=errors.get)
    if errors[worst] > tolerance:
        return False, f"{worst}: relative error {errors[worst]:.3g}"
    return True, f"{len(errors)} parameter groups, worst {worst} at {errors[worst]:.3g}"


CHECKS: dict[str, Check] = {
    "mst-enumeration": check_mst_enumeration,
    "scan-equivariance": check_scan_equivariance,
    "consecutive-similarity": check_consecutive_similarity,
    "zoh-discretization": check_zoh,
    "ssm-recurrence": check_recurrence,
    "adjacency-oracle": check_adjacency,
    "correlation-normalization": check_normalization,
    "primitive-gradients": check_primitive_gradients,
    "end-to-end-gradients": check_end_to_end_gradients,
}


def run_check(name: str, check: Check, seed: int = 0) -> CheckResult:
    start = time.perf_counter()
    try:
        passed, detail = check(np.random.default_rng(seed))
    except HGFXError as exc:
        passed, detail = False, f"{type(exc).__name__}: {exc}"
    result = CheckResult(name=name, passed=passed, detail=detail, seconds=time.perf_counter() - start)
    logger.log(logging.INFO if passed else logging.ERROR, "%s %s (%.2fs): %s",
               "PASS" if passed else "FAIL", name, result.seconds, detail)
    return result


def run_verification(names: list[str] | None = None, seed: int = 0) -> list[CheckResult]:
    selected = list(CHECKS) if not names else names
    unknown = [name for name in selected if name not in CHECKS]
    if unknown:
        raise ConfigError(f"unknown check(s) {unknown}; choose from {sorted(CHECKS)}")
    return [run_check(name, CHECKS[name], seed) for name in selected]
