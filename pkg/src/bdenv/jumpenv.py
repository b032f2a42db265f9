"""Finite jump environments coupled to a birth-death level process.

The joint chain lives on {0..n_max} x {environment states}.  From (n, z) it
moves to (n+1, z) at rate lambda_n(z), to (n-1, z) at rate mu_n(z), and to
(n, z') at rate tau_n(z, z') / r_n(z), where T_n = (tau_n) is the level-n
environment generator and r_n(z) the cumulative rate ratio.  No transition
changes both coordinates at once.

When one probability vector v satisfies v' T_n = 0 for every level, the joint
chain has the product-form invariant measure

    pi(n, z) = r_n(z) v(z) / Xi,    Xi = sum_{n,z} r_n(z) v(z),

which `invariant_measure_jump` computes (in log space) and `verify_balance`
certifies against the generator row by row.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Iterable, Sequence

import numpy as np
from scipy.linalg import null_space
from scipy.special import logsumexp

from .errors import (
    Divergence,
    DomainError,
    NoCommonV,
    RateExplosion,
    XiDivergent,
)
from .models import ModelSpec, check_summability, cumulative_ratio
from .stats import EmpiricalMeasure

_GEN_ROW_TOL = 1e-12
_COMMON_V_TOL = 1e-10
_DEFAULT_PROBES = (0, 1, 2, 3, 8, 32, 128)


@dataclass(frozen=True)
class EnvChainSpec:
    """A finite environment: state labels plus per-level generator matrices.

    generators(n) returns the (m, m) generator T_n (off-diagonal >= 0, rows
    summing to zero).  The common construction T_n = beta_n * T is covered by
    `env_from_matrix`.
    """

    states: tuple
    generators: Callable[[int], np.ndarray]

    @property
    def m(self) -> int:
        return len(self.states)

    def index(self, label) -> int:
        return self.states.index(label)


def env_from_matrix(states: Sequence, T, beta=None) -> EnvChainSpec:
    """Environment with T_n = beta_n * T.

    beta may be None (constant 1), a number, ("geometric", a), a sequence
    (table, indexed by n and clamped at its end), or a callable n -> beta_n.
    """
    T = np.asarray(T, dtype=float)
    validate_generator(T)
    if len(states) != T.shape[0]:
        raise DomainError("state labels and generator dimension mismatch")

    if beta is None:
        scale = lambda n: 1.0
    elif callable(beta):
        scale = beta
    elif isinstance(beta, (tuple, list)) and len(beta) == 2 and beta[0] == "geometric":
        a = float(beta[1])
        if a <= 0:
            raise DomainError("geometric tempering base must be positive")
        scale = lambda n: a**n
    elif isinstance(beta, (tuple, list)):
        table = [float(b) for b in beta]
        scale = lambda n: table[min(n, len(table) - 1)]
    else:
        b = float(beta)
        scale = lambda n: b

    def generators(n: int) -> np.ndarray:
        s = float(scale(n))
        if s <= 0:
            raise DomainError(f"tempering beta_{n} = {s} must be positive")
        return s * T

    return EnvChainSpec(states=tuple(states), generators=generators)


def validate_generator(T: np.ndarray, tol: float = _GEN_ROW_TOL) -> None:
    """Check generator shape, sign pattern, zero row sums, irreducibility."""
    T = np.asarray(T, dtype=float)
    if T.ndim != 2 or T.shape[0] != T.shape[1]:
        raise DomainError("generator must be a square matrix")
    m = T.shape[0]
    scale = max(float(np.max(np.abs(T))), 1.0)
    off = T.copy()
    np.fill_diagonal(off, 0.0)
    if np.any(off < -tol * scale):
        raise DomainError("negative off-diagonal rate in generator")
    if np.any(np.abs(T.sum(axis=1)) > tol * m * scale):
        raise DomainError("generator rows do not sum to zero")
    if m > 1 and not _strongly_connected(off > 0):
        raise DomainError("generator support graph is not irreducible")


def _strongly_connected(adj: np.ndarray) -> bool:
    m = adj.shape[0]

    def reach(a: np.ndarray) -> np.ndarray:
        seen = np.zeros(m, dtype=bool)
        seen[0] = True
        frontier = [0]
        while frontier:
            i = frontier.pop()
            for j in np.nonzero(a[i])[0]:
                if not seen[j]:
                    seen[j] = True
                    frontier.append(int(j))
        return seen

    return bool(reach(adj).all() and reach(adj.T).all())


def solve_common_v(env: EnvChainSpec, probes: Iterable[int] = _DEFAULT_PROBES) -> np.ndarray:
    """Find the probability vector v with v' T_n = 0 at every probed level.

    v is the stationary law of T at the first probe (one-dimensional null
    space of T'); each remaining probe is then checked at relative tolerance
    1e-10 and the first failure raises NoCommonV with the level and residual.
    """
    probes = list(probes)
    if not probes:
        raise DomainError("need at least one probe level")
    T0 = np.asarray(env.generators(probes[0]), dtype=float)
    validate_generator(T0)
    if env.m == 1:
        v = np.array([1.0])
    else:
        ns = null_space(T0.T)
        if ns.shape[1] != 1:
            raise NoCommonV(
                f"left null space of T_{probes[0]} has dimension {ns.shape[1]}, not 1"
            )
        v = np.abs(ns[:, 0])
        v = v / v.sum()
    for n in probes:
        T = np.asarray(env.generators(n), dtype=float)
        validate_generator(T)
        scale = max(float(np.max(np.abs(T))), np.finfo(float).tiny)
        residual = float(np.max(np.abs(v @ T))) / scale
        if residual > _COMMON_V_TOL:
            raise NoCommonV(
                f"v' T_n != 0 at level n={n}: relative residual {residual:.3g}",
                failing_n=n,
                residual=residual,
            )
    return v


@dataclass(frozen=True)
class JointGeneratorMatrix:
    """Structured form of the joint generator on {0..n_max} x states.

    Entries are stored as rate families, not one dense matrix: lam[n, j] and
    mu[n, j] are the level rates at state j, log_r[n, j] the log cumulative
    ratios, and T[n] the level-n environment generator.  The environment rate
    out of (n, j) toward (n, k) is T[n][j, k] * exp(-log_r[n, j]), which can
    exceed double range for deep levels; `entry` returns inf there and the
    COO export writes it as inf.  The last level n_max is the truncation row
    (no births out of it) and is excluded from balance checks.
    """

    states: tuple
    n_max: int
    lam: np.ndarray
    mu: np.ndarray
    log_r: np.ndarray
    T: tuple

    @property
    def m(self) -> int:
        return len(self.states)

    @property
    def dimension(self) -> int:
        return (self.n_max + 1) * self.m

    def state_index(self, n: int, j: int) -> int:
        return n * self.m + j

    def entry(self, a: tuple[int, int], b: tuple[int, int]) -> float:
        """Rate from joint state a = (n, j) to b = (n', k); indices, not labels."""
        n, j = a
        n2, k = b
        if not (0 <= n <= self.n_max and 0 <= j < self.m):
            raise DomainError(f"state {a} out of range")
        if not (0 <= n2 <= self.n_max and 0 <= k < self.m):
            raise DomainError(f"state {b} out of range")
        if a == b:
            out = self.mu[n, j]
            if n < self.n_max:
                out += self.lam[n, j]
            with np.errstate(over="ignore"):
                env_out = -self.T[n][j, j] * np.exp(-self.log_r[n, j])
            return -float(out + env_out)
        if j == k and n2 == n + 1:
            return float(self.lam[n, j]) if n < self.n_max else 0.0
        if j == k and n2 == n - 1:
            return float(self.mu[n, j])
        if n2 == n and j != k:
            with np.errstate(over="ignore"):
                return float(self.T[n][j, k] * np.exp(-self.log_r[n, j]))
        return 0.0

    def coo_rows(self):
        """Yield (row_index, col_index, rate) for all nonzero entries."""
        for n in range(self.n_max + 1):
            for j in range(self.m):
                row = self.state_index(n, j)
                for n2, k in self._neighbors(n, j):
                    rate = self.entry((n, j), (n2, k))
                    if rate != 0.0:
                        yield row, self.state_index(n2, k), rate
                yield row, row, self.entry((n, j), (n, j))

    def _neighbors(self, n: int, j: int):
        if n < self.n_max:
            yield n + 1, j
        if n > 0:
            yield n - 1, j
        for k in range(self.m):
            if k != j:
                yield n, k

    def write_coo(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("row\tcol\trate\n")
            for row, col, rate in self.coo_rows():
                fh.write(f"{row}\t{col}\t{rate!r}\n")

    def as_dense(self) -> np.ndarray:
        """Dense matrix, for small truncations in tests; entries may be inf."""
        if self.dimension > 4096:
            raise DomainError("dense export limited to dimension <= 4096")
        out = np.zeros((self.dimension, self.dimension))
        for row, col, rate in self.coo_rows():
            out[row, col] = rate
        return out


def build_joint_generator(model: ModelSpec, env: EnvChainSpec, n_max: int) -> JointGeneratorMatrix:
    """Assemble the joint generator structure for levels 0..n_max.

    Requires a certifiably summable weight series at every environment state
    (Divergence otherwise) and validates the environment generator at a
    spread of probe levels.
    """
    m = env.m
    lam = np.zeros((n_max + 1, m))
    mu = np.zeros((n_max + 1, m))
    log_r = np.zeros((n_max + 1, m))
    for j, label in enumerate(env.states):
        rep = check_summability(model, label, n_max=max(n_max, 64))
        if rep.status == "divergent":
            raise Divergence(
                f"weight series diverges at environment state {label!r}"
            )
        cr = cumulative_ratio(model, label, n_max)
        log_r[:, j] = cr.log_values
        levels = np.arange(0, n_max + 1)
        try:
            lam[:, j] = np.broadcast_to(
                np.asarray(model.birth_rate(levels, label), dtype=float), (n_max + 1,)
            )
            mu[:, j] = np.broadcast_to(
                np.asarray(model.death_rate(levels, label), dtype=float), (n_max + 1,)
            )
        except Exception:
            lam[:, j] = [float(model.birth_rate(int(k), label)) for k in levels]
            mu[:, j] = [float(model.death_rate(int(k), label)) for k in levels]
        mu[0, j] = 0.0
    T = tuple(np.asarray(env.generators(n), dtype=float) for n in range(n_max + 1))
    for n in {0, 1, n_max // 2, n_max}:
        validate_generator(T[n])
    return JointGeneratorMatrix(
        states=tuple(env.states), n_max=n_max, lam=lam, mu=mu, log_r=log_r, T=T
    )


@dataclass(frozen=True)
class InvariantMeasureJump:
    """Product-form invariant law pi(n, z) = r_n(z) v(z) / Xi.

    log_weights holds log pi over the truncated grid; `weights` exponentiates
    (deep-tail entries underflow to 0 there, by design).  tail_bound is the
    relative mass bound beyond n_max; sum(weights) + tail_bound = 1 within
    1e-10.  Xi may overflow to inf for extreme parameters; log_Xi is exact.
    """

    states: tuple
    n_max: int
    v: np.ndarray
    log_weights: np.ndarray
    log_Xi: float
    tail_bound: float

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    @property
    def Xi(self) -> float:
        with np.errstate(over="ignore"):
            return float(np.exp(self.log_Xi))

    def as_measure(self) -> EmpiricalMeasure:
        """The truncated law as cells (n, label), renormalized over the grid."""
        cells = tuple(
            (n, label) for n in range(self.n_max + 1) for label in self.states
        )
        masses = self.weights.reshape(-1)
        return EmpiricalMeasure(cells=cells, masses=masses / masses.sum(), sample_count=0)


def invariant_measure_jump(model: ModelSpec, env: EnvChainSpec, n_max: int,
                           tol: float = 1e-10,
                           probes: Iterable[int] = _DEFAULT_PROBES) -> InvariantMeasureJump:
    """Compute the product-form law over levels 0..n_max.

    Raises NoCommonV if the environment has no level-independent stationary
    vector, XiDivergent if the weight series at some state shows no geometric
    tail or the truncated tail mass exceeds tol.
    """
    v = solve_common_v(env, probes)
    m = env.m
    log_eta = np.empty((n_max + 1, m))
    log_tails = np.empty(m)
    for j, label in enumerate(env.states):
        cr = cumulative_ratio(model, label, n_max)
        try:
            log_tail = _tail_log_bound_from(cr)
        except Divergence as exc:
            raise XiDivergent(
                f"Xi diverges: no geometric tail at state {label!r}: {exc}"
            ) from exc
        log_eta[:, j] = cr.log_values + np.log(v[j])
        log_tails[j] = log_tail + np.log(v[j])
    log_main = float(logsumexp(log_eta))
    log_tail_total = float(logsumexp(log_tails))
    log_Xi = float(np.logaddexp(log_main, log_tail_total))
    tail_bound = float(np.exp(log_tail_total - log_Xi))
    if tail_bound > tol:
        raise XiDivergent(
            f"truncated tail mass {tail_bound:.3g} exceeds tol={tol:.3g}; increase n_max"
        )
    return InvariantMeasureJump(
        states=tuple(env.states),
        n_max=n_max,
        v=v,
        log_weights=log_eta - log_Xi,
        log_Xi=log_Xi,
        tail_bound=tail_bound,
    )


def _tail_log_bound_from(cr) -> float:
    from .models import _tail_log_bound

    return _tail_log_bound(cr)


def verify_balance(gen: JointGeneratorMatrix, measure) -> float:
    """Max relative stationarity residual of eta = r v over interior rows.

    For each row (n, z) with n < n_max, the residual is |eta' R|(n, z)
    divided by eta(n, z) * |R[(n,z),(n,z)]|.  Terms are combined in
    log-magnitude form so deep-level rows (r_n below underflow) still
    evaluate exactly; rows whose scale is zero (unreachable gated states with
    a one-state environment) are skipped.

    `measure` may be an InvariantMeasureJump or a bare environment vector v.
    """
    v = measure.v if hasattr(measure, "v") else np.asarray(measure, dtype=float)
    if v.shape != (gen.m,):
        raise DomainError("environment vector length mismatch")
    if np.any(v <= 0):
        raise DomainError("environment vector must be strictly positive")
    log_v = np.log(v)
    worst = 0.0
    with np.errstate(divide="ignore"):
        log_lam = np.log(gen.lam)
        log_mu = np.log(gen.mu)
    for n in range(gen.n_max):
        Tn = gen.T[n]
        for j in range(gen.m):
            signs = []
            mags = []
            # birth into (n, j) from (n-1, j)
            if n >= 1:
                signs.append(1.0)
                mags.append(log_lam[n - 1, j] + gen.log_r[n - 1, j] + log_v[j])
            # death into (n, j) from (n+1, j)
            signs.append(1.0)
            mags.append(log_mu[n + 1, j] + gen.log_r[n + 1, j] + log_v[j])
            # environment moves: eta(n, k) tau(k, j) / r_n(k) = v(k) tau(k, j)
            for k in range(gen.m):
                if k == j:
                    continue
                t = Tn[k, j]
                if t > 0:
                    signs.append(1.0)
                    mags.append(np.log(t) + log_v[k])
            # outflow: level parts and environment part
            out_level = gen.lam[n, j] + gen.mu[n, j]
            den_terms = []
            if out_level > 0:
                signs.append(-1.0)
                mags.append(np.log(out_level) + gen.log_r[n, j] + log_v[j])
                den_terms.append(mags[-1])
            diag = -Tn[j, j]
            if diag > 0:
                signs.append(-1.0)
                mags.append(np.log(diag) + log_v[j])
                den_terms.append(mags[-1])
            mags_arr = np.array(mags)
            finite = np.isfinite(mags_arr)
            if not finite.any() or not den_terms:
                continue
            L = float(mags_arr[finite].max())
            num = float(np.sum(np.array(signs)[finite] * np.exp(mags_arr[finite] - L)))
            den = float(np.sum(np.exp(np.array(den_terms) - L)))
            if den == 0.0:
                continue
            worst = max(worst, abs(num) / den)
    return worst


@dataclass(frozen=True)
class JumpPathResult:
    """Output of the joint Gillespie run.

    occupancy is time-weighted over (n, state-label) cells; events counts by
    kind; the optional path arrays carry (time, n, state-index, kind) with
    kind 0 = birth, 1 = death, 2 = environment move.
    """

    occupancy: EmpiricalMeasure
    total_time: float
    n_events: int
    counts_by_kind: dict
    final_state: tuple
    path: dict | None


EVENT_KIND_NAMES = ("birth", "death", "env")


def simulate_jump_joint(model: ModelSpec, env: EnvChainSpec, initial: tuple,
                        horizon: float, seed: int, rate_cap: float = 1e9,
                        record: str = "occupancy",
                        max_events: int | None = None) -> JumpPathResult:
    """Exact-event simulation of the joint chain (Gillespie).

    initial = (n, state_label).  Runs until `horizon` of process time or
    `max_events` events, whichever comes first.  The environment clock at
    (n, z) runs at rate tau_n(z, .) / r_n(z); a total exit rate above
    rate_cap raises RateExplosion (deep-level visits with strong tempering
    mismatch are a configuration error, not something to silence).
    """
    if record not in ("occupancy", "path", "terminal"):
        raise DomainError(f"unknown record mode {record!r}")
    rng = np.random.default_rng(seed)
    n, label = initial
    n = int(n)
    j = env.index(label)
    m = env.m

    log_r_cache: dict[int, np.ndarray] = {0: np.zeros(m)}

    def log_r_row(level: int) -> np.ndarray:
        row = log_r_cache.get(level)
        if row is None:
            prev = log_r_row(level - 1)
            lam_prev = np.array(
                [float(model.birth_rate(level - 1, lab)) for lab in env.states]
            )
            mu_here = np.array(
                [float(model.death_rate(level, lab)) for lab in env.states]
            )
            with np.errstate(divide="ignore"):
                row = prev + np.log(lam_prev) - np.log(mu_here)
            log_r_cache[level] = row
        return row

    # per-(n, j) cached event table: (total, cum, moves) where moves[i] is the
    # (dn, new_j, kind) applied when the uniform falls in slot i
    table_cache: dict[tuple[int, int], tuple] = {}

    def table(level: int, state: int) -> tuple:
        key = (level, state)
        entry = table_cache.get(key)
        if entry is None:
            lab = env.states[state]
            lam = float(model.birth_rate(level, lab))
            mu = float(model.death_rate(level, lab)) if level > 0 else 0.0
            inv_r = float(np.exp(-log_r_row(level)[state]))
            Tn = np.asarray(env.generators(level), dtype=float)
            rates = [lam, mu]
            moves = [(1, state, 0), (-1, state, 1)]
            for k in range(m):
                if k != state and Tn[state, k] > 0:
                    rates.append(Tn[state, k] * inv_r)
                    moves.append((0, k, 2))
            rates_arr = np.array(rates)
            total = float(rates_arr.sum())
            entry = (total, np.cumsum(rates_arr), tuple(moves))
            table_cache[key] = entry
        return entry

    occupancy: dict[tuple, float] = {}
    counts = {0: 0, 1: 0, 2: 0}
    path_t: list[float] = []
    path_n: list[int] = []
    path_j: list[int] = []
    path_kind: list[int] = []

    t = 0.0
    n_events = 0
    while True:
        total, cum, moves = table(n, j)
        if total > rate_cap:
            raise RateExplosion(
                f"total exit rate {total:.3g} at (n={n}, z={env.states[j]!r}) "
                f"exceeds rate_cap={rate_cap:.3g}"
            )
        if total <= 0.0:
            occupancy[(n, env.states[j])] = occupancy.get((n, env.states[j]), 0.0) + (
                horizon - t
            )
            t = horizon
            break
        hold = rng.exponential(1.0 / total)
        if t + hold >= horizon or (max_events is not None and n_events >= max_events):
            occupancy[(n, env.states[j])] = occupancy.get((n, env.states[j]), 0.0) + (
                min(t + hold, horizon) - t
            )
            t = min(t + hold, horizon)
            break
        occupancy[(n, env.states[j])] = occupancy.get((n, env.states[j]), 0.0) + hold
        t += hold
        u = rng.random() * total
        slot = int(np.searchsorted(cum, u, side="right"))
        slot = min(slot, len(moves) - 1)
        dn, new_j, kind = moves[slot]
        n += dn
        j = new_j
        counts[kind] += 1
        n_events += 1
        if record == "path":
            path_t.append(t)
            path_n.append(n)
            path_j.append(j)
            path_kind.append(kind)

    occ_measure = EmpiricalMeasure.from_counts(occupancy, sample_count=n_events)
    path = None
    if record == "path":
        path = {
            "t": np.array(path_t),
            "n": np.array(path_n, dtype=int),
            "z_index": np.array(path_j, dtype=int),
            "kind": np.array(path_kind, dtype=int),
        }
    return JumpPathResult(
        occupancy=occ_measure,
        total_time=t,
        n_events=n_events,
        counts_by_kind={EVENT_KIND_NAMES[k]: c for k, c in counts.items()},
        final_state=(n, env.states[j]),
        path=path,
    )
