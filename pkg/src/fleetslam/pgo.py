"""Pose graph construction and optimization.

Variables are planar keyframe poses keyed by (robot, keyframe). Factors
are pose priors and relative-pose (between) measurements; inter-robot
loop closures are between factors flagged robust, so a Cauchy kernel
down-weights any that disagree with the rest of the graph. The solver
is Levenberg-Marquardt on analytic Jacobians over sparse normal
equations.

Inter-robot optimization runs in two steps to keep each robot's solve
small: step one adjusts the local trajectory together with only the
neighbor keyframes touched by loop closures, step two redistributes the
correction along each neighbor's full relayed trajectory using soft
priors taken from step one's marginals. A joint full-graph variant is
kept for comparison.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from fleetslam.consistency import LoopClosure
from fleetslam.geometry import (Pose2, between, check_covariance, compose,
                                inverse, wrap_angle)

Key = tuple[int, int]

# d/dtheta of R(theta)^T equals R(theta)^T @ _K
_K = np.array([[0.0, 1.0], [-1.0, 0.0]])


@dataclass(frozen=True)
class Factor:
    """A single error term.

    Attributes:
        kind: "prior" or "between".
        keys: one key for priors, (from, to) for between factors.
        z: measured pose; for between factors the pose of `to`
            expressed in `from`'s frame.
        white: 3x3 whitening matrix, upper Cholesky factor of the
            information matrix.
        robust: apply the Cauchy kernel to this factor.
    """

    kind: str
    keys: tuple[Key, ...]
    z: Pose2
    white: np.ndarray
    robust: bool = False


def _whitener(cov) -> np.ndarray:
    cov = check_covariance(cov)
    info = np.linalg.inv(cov)
    return np.linalg.cholesky(info).T


@dataclass
class OptimizeParams:
    """Levenberg-Marquardt configuration.

    Attributes:
        max_iter: accepted-step cap.
        tol: stop when the relative cost decrease of an accepted step
            falls below this.
        lambda_init: initial damping.
        lambda_max: damping ceiling; exceeded means no progress.
        cauchy_c: Cauchy kernel scale in whitened units.
        robust: honor factor robust flags; off makes every factor a
            plain quadratic term.
    """

    max_iter: int = 50
    tol: float = 1e-9
    lambda_init: float = 1e-4
    lambda_max: float = 1e10
    cauchy_c: float = 1.0
    robust: bool = True


@dataclass
class OptimizationReport:
    """Solve statistics.

    final_error never exceeds initial_error because only cost-reducing
    steps are accepted.
    """

    initial_error: float
    final_error: float
    iterations: int
    converged: bool


class FactorGraph:
    """Mutable pose graph.

    Attributes:
        variables: current estimates keyed by (robot, keyframe).
        factors: error terms over those variables.
    """

    def __init__(self):
        self.variables: dict[Key, Pose2] = {}
        self.factors: list[Factor] = []

    def copy(self) -> "FactorGraph":
        g = FactorGraph()
        g.variables = dict(self.variables)
        g.factors = list(self.factors)
        return g

    def ensure_variable(self, key: Key, pose: Pose2) -> None:
        """Adds a variable if absent; existing estimates are kept."""
        self.variables.setdefault(key, pose)

    def add_prior(self, key: Key, pose: Pose2, cov,
                  robust: bool = False) -> None:
        """Anchors a variable, creating it at the prior if absent."""
        self.ensure_variable(key, pose)
        self.factors.append(Factor("prior", (key,), pose, _whitener(cov),
                                   robust))

    def add_between(self, key_a: Key, key_b: Key, z: Pose2, cov,
                    robust: bool = False) -> None:
        """Adds a relative-pose factor between two existing variables.

        Args:
            key_a: frame the measurement is expressed in.
            key_b: measured variable.
            z: pose of key_b expressed in key_a's frame.
            cov: 3x3 measurement covariance.
            robust: down-weight with the Cauchy kernel when outlying.

        Raises:
            KeyError: either endpoint is missing.
            ValueError: identical endpoints or invalid covariance.
        """
        if key_a == key_b:
            raise ValueError("between factor endpoints must differ")
        for key in (key_a, key_b):
            if key not in self.variables:
                raise KeyError(f"variable {key} not in graph")
        self.factors.append(Factor("between", (key_a, key_b), z,
                                   _whitener(cov), robust))

    def add_odometry_chain(self, robot: int, start_kf: int,
                           motions: list[Pose2], cov,
                           start_pose: Pose2 | None = None) -> None:
        """Appends consecutive odometry factors for one robot.

        Creates (robot, start_kf) at start_pose (identity by default)
        when absent, then one between factor per motion, initializing
        each new variable by composition.
        """
        key = (robot, start_kf)
        self.ensure_variable(key, start_pose or Pose2())
        white = _whitener(cov)
        for i, motion in enumerate(motions):
            nxt = (robot, start_kf + i + 1)
            self.ensure_variable(nxt, compose(self.variables[key], motion))
            self.factors.append(Factor("between", (key, nxt), motion, white))
            key = nxt

    def add_loop_factor(self, key_local: Key, key_neighbor: Key, z: Pose2,
                        cov) -> None:
        """Adds a robust inter-robot loop closure factor."""
        self.add_between(key_local, key_neighbor, z, cov, robust=True)

    def check_gauge(self) -> None:
        """Verifies every connected component is anchored by a prior.

        Raises:
            ValueError: some component has no prior (the solve would be
            rank deficient) or the graph has no factors.
        """
        if not self.variables:
            raise ValueError("graph has no variables")
        keys = sorted(self.variables)
        idx = {k: i for i, k in enumerate(keys)}
        parent = list(range(len(keys)))

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        anchored = set()
        for f in self.factors:
            if f.kind == "prior":
                anchored.add(find(idx[f.keys[0]]))
            else:
                a, b = find(idx[f.keys[0]]), find(idx[f.keys[1]])
                if a != b:
                    parent[a] = b
        anchored = {find(r) for r in anchored}
        for k in keys:
            if find(idx[k]) not in anchored:
                raise ValueError(f"variable {k} is not anchored by any prior")


def _linearize(factor: Factor, variables: dict[Key, Pose2]):
    """Residual and per-variable Jacobian blocks of one factor."""
    z = factor.z
    rz_t = z.rotation().T
    if factor.kind == "prior":
        x = variables[factor.keys[0]]
        r = np.empty(3)
        r[:2] = rz_t @ (x.translation - z.translation)
        r[2] = wrap_angle(x.theta - z.theta)
        jac = np.zeros((3, 3))
        jac[:2, :2] = rz_t
        jac[2, 2] = 1.0
        return r, {factor.keys[0]: jac}
    a = variables[factor.keys[0]]
    b = variables[factor.keys[1]]
    ra_t = a.rotation().T
    d = b.translation - a.translation
    r = np.empty(3)
    r[:2] = rz_t @ (ra_t @ d - z.translation)
    r[2] = wrap_angle(b.theta - a.theta - z.theta)
    rzra = rz_t @ ra_t
    ja = np.zeros((3, 3))
    ja[:2, :2] = -rzra
    ja[:2, 2] = rzra @ (_K @ d)
    ja[2, 2] = -1.0
    jb = np.zeros((3, 3))
    jb[:2, :2] = rzra
    jb[2, 2] = 1.0
    return r, {factor.keys[0]: ja, factor.keys[1]: jb}


def _factor_cost(rw: np.ndarray, robust: bool,
                 params: OptimizeParams) -> float:
    s = float(rw @ rw)
    if robust and params.robust:
        c2 = params.cauchy_c ** 2
        return 0.5 * c2 * math.log1p(s / c2)
    return 0.5 * s


def _total_cost(graph: FactorGraph, variables: dict[Key, Pose2],
                params: OptimizeParams) -> float:
    cost = 0.0
    for f in graph.factors:
        r, _ = _linearize(f, variables)
        cost += _factor_cost(f.white @ r, f.robust, params)
    return cost


def _assemble(graph: FactorGraph, variables: dict[Key, Pose2],
              idx: dict[Key, int], params: OptimizeParams):
    """Builds the weighted sparse Jacobian, residual, and cost."""
    nf = len(graph.factors)
    rvec = np.zeros(3 * nf)
    rows, cols, vals = [], [], []
    cost = 0.0
    for fi, f in enumerate(graph.factors):
        r, jblocks = _linearize(f, variables)
        rw = f.white @ r
        s = float(rw @ rw)
        sw = 1.0
        if f.robust and params.robust:
            c2 = params.cauchy_c ** 2
            cost += 0.5 * c2 * math.log1p(s / c2)
            sw = math.sqrt(1.0 / (1.0 + s / c2))
        else:
            cost += 0.5 * s
        rvec[3 * fi:3 * fi + 3] = sw * rw
        for key, jb in jblocks.items():
            block = sw * (f.white @ jb)
            base_r, base_c = 3 * fi, 3 * idx[key]
            for i in range(3):
                for j in range(3):
                    rows.append(base_r + i)
                    cols.append(base_c + j)
                    vals.append(block[i, j])
    jac = sp.coo_matrix((vals, (rows, cols)),
                        shape=(3 * nf, 3 * len(idx))).tocsr()
    return rvec, jac, cost


def optimize(graph: FactorGraph,
             params: OptimizeParams | None = None) -> OptimizationReport:
    """Optimizes a factor graph in place with Levenberg-Marquardt.

    Args:
        graph: anchored graph; variable estimates are updated.
        params: solver configuration, defaults used when None.

    Returns:
        OptimizationReport with robust total costs.

    Raises:
        ValueError: unanchored graph or no factors.
    """
    params = params or OptimizeParams()
    graph.check_gauge()
    if not graph.factors:
        raise ValueError("graph has no factors")
    keys = sorted(graph.variables)
    idx = {k: i for i, k in enumerate(keys)}
    variables = dict(graph.variables)

    initial = _total_cost(graph, variables, params)
    cost = initial
    lam = params.lambda_init
    iterations = 0
    converged = False
    for _ in range(params.max_iter):
        rvec, jac, cost = _assemble(graph, variables, idx, params)
        hess = (jac.T @ jac).tocsr()
        grad = jac.T @ rvec
        diag = np.maximum(hess.diagonal(), 1e-12)
        stepped = False
        while lam <= params.lambda_max:
            damped = (hess + sp.diags(lam * diag)).tocsc()
            delta = spsolve(damped, -grad)
            if not np.all(np.isfinite(delta)):
                lam *= 10.0
                continue
            if float(np.linalg.norm(delta)) < 1e-14:
                converged = True
                stepped = False
                break
            trial = {}
            for k in keys:
                v = variables[k]
                d = delta[3 * idx[k]:3 * idx[k] + 3]
                trial[k] = Pose2(v.x + d[0], v.y + d[1], v.theta + d[2])
            new_cost = _total_cost(graph, trial, params)
            if new_cost <= cost:
                variables = trial
                iterations += 1
                stepped = True
                decrease = cost - new_cost
                if decrease < params.tol * max(cost, 1e-30):
                    converged = True
                cost = new_cost
                lam = max(lam / 10.0, 1e-15)
                break
            lam *= 10.0
        if not stepped or converged:
            break

    graph.variables = variables
    return OptimizationReport(initial_error=initial, final_error=cost,
                              iterations=iterations, converged=converged)


def marginal_blocks(graph: FactorGraph, keys: list[Key],
                    params: OptimizeParams | None = None
                    ) -> dict[Key, np.ndarray]:
    """Approximate marginal covariances from Hessian diagonal blocks.

    The inverse of a variable's own 3x3 Hessian block underestimates
    the true marginal but is cheap and preserves relative confidence,
    which is all the second optimization step needs for its soft
    priors.

    Args:
        graph: optimized graph.
        keys: variables to extract.
        params: weighting configuration matching the solve.

    Returns:
        key -> 3x3 covariance.
    """
    params = params or OptimizeParams()
    all_keys = sorted(graph.variables)
    idx = {k: i for i, k in enumerate(all_keys)}
    _, jac, _ = _assemble(graph, graph.variables, idx, params)
    hess = (jac.T @ jac).tocsc()
    out = {}
    for key in keys:
        i = 3 * idx[key]
        block = hess[i:i + 3, i:i + 3].toarray()
        out[key] = np.linalg.inv(block + 1e-9 * np.eye(3))
    return out


@dataclass
class PgoParams:
    """Distributed optimization configuration.

    Attributes:
        optimize: inner solver settings.
        relay_cov: per-step covariance assumed for relayed neighbor
            odometry; gaps of g keyframes get g times this.
        prior_cov: anchor prior covariance.
    """

    optimize: OptimizeParams = field(default_factory=OptimizeParams)
    relay_cov: np.ndarray = field(
        default_factory=lambda: np.diag([2.5e-3, 2.5e-3, 1e-4]))
    prior_cov: np.ndarray = field(
        default_factory=lambda: np.diag([1e-6, 1e-6, 1e-6]))


@dataclass
class TwoStepResult:
    """Output of the two-step distributed solve.

    Attributes:
        estimates: optimized poses for the local robot and every
            neighbor keyframe that could be placed, all in the local
            map frame.
        placements: refined neighbor map origins in the local frame.
        reports: step-one report first, then one per optimized
            neighbor in id order.
    """

    estimates: dict[Key, Pose2]
    placements: dict[int, Pose2]
    reports: list[OptimizationReport]


def _chain_dict(chain: list[tuple[int, Pose2]]) -> dict[int, Pose2]:
    return {kf: pose for kf, pose in chain}


def _initial_placement(nbr: int, closures: list[LoopClosure],
                       local_graph: FactorGraph,
                       chain: dict[int, Pose2],
                       placements: dict[int, Pose2]) -> Pose2 | None:
    if nbr in placements:
        return placements[nbr]
    for z in closures:
        if z.neighbor_robot != nbr or z.neighbor_kf not in chain:
            continue
        local = local_graph.variables.get((z.local_robot, z.local_kf))
        if local is None:
            continue
        return compose(compose(local, z.measurement),
                       inverse(chain[z.neighbor_kf]))
    return None


def two_step_optimize(local_robot: int, local_graph: FactorGraph,
                      closures: list[LoopClosure],
                      neighbor_chains: dict[int, list[tuple[int, Pose2]]],
                      placements: dict[int, Pose2] | None = None,
                      params: PgoParams | None = None,
                      relayed: list[LoopClosure] | None = None,
                      ) -> TwoStepResult:
    """Distributed pose graph optimization in two bounded steps.

    Step one: optimize the local trajectory jointly with only the
    neighbor keyframes touched by accepted closures; touched keyframes
    of one neighbor are tied together by relative factors derived from
    the neighbor's relayed trajectory. Step two, per neighbor: optimize
    the neighbor's full relayed trajectory against soft priors that pin
    the touched keyframes where step one put them, with covariances
    from step one's marginals. A neighbor without its own closures is
    solved against robust anchor priors derived from relayed closures
    whose other endpoint is already estimated; failing that it is
    placed rigidly by its map transform when one is known.

    Args:
        local_robot: id owning local_graph.
        local_graph: anchored local graph (priors + odometry and any
            sequential factors); not mutated.
        closures: accepted inter-robot closures of this robot.
        neighbor_chains: per neighbor, relayed (keyframe, pose) pairs
            in that neighbor's own frame, keyframe-ascending.
        placements: optional initial neighbor map origins in the local
            frame; derived from a closure when missing.
        params: configuration, defaults used when None.
        relayed: closures accepted by other robots and shared over the
            channel; they anchor chains this robot never closed with.

    Returns:
        TwoStepResult.
    """
    params = params or PgoParams()
    placements = dict(placements or {})
    chains = {nbr: _chain_dict(chain)
              for nbr, chain in neighbor_chains.items()}
    relayed = [z for z in (relayed or []) if z.local_robot != local_robot]

    by_nbr: dict[int, list[LoopClosure]] = {}
    for z in closures:
        if z.local_robot != local_robot:
            continue
        if z.neighbor_kf not in chains.get(z.neighbor_robot, {}):
            continue
        if (z.local_robot, z.local_kf) not in local_graph.variables:
            continue
        by_nbr.setdefault(z.neighbor_robot, []).append(z)

    step1 = local_graph.copy()
    touched: dict[int, list[int]] = {}
    for nbr in sorted(by_nbr):
        chain = chains[nbr]
        place = _initial_placement(nbr, by_nbr[nbr], local_graph, chain,
                                   placements)
        if place is None:
            continue
        kfs = sorted({z.neighbor_kf for z in by_nbr[nbr]})
        touched[nbr] = kfs
        for kf in kfs:
            step1.ensure_variable((nbr, kf), compose(place, chain[kf]))
        for k1, k2 in zip(kfs, kfs[1:]):
            gap = k2 - k1
            step1.add_between((nbr, k1), (nbr, k2),
                              between(chain[k1], chain[k2]),
                              gap * params.relay_cov)
        for z in by_nbr[nbr]:
            step1.add_loop_factor((z.local_robot, z.local_kf),
                                  (nbr, z.neighbor_kf), z.measurement,
                                  z.covariance)
    reports = [optimize(step1, params.optimize)]

    estimates = {k: v for k, v in step1.variables.items()
                 if k[0] == local_robot}
    out_placements: dict[int, Pose2] = {}

    anchor_keys = [(nbr, kf) for nbr in sorted(touched)
                   for kf in touched[nbr]]
    anchor_cov = (marginal_blocks(step1, anchor_keys, params.optimize)
                  if anchor_keys else {})

    def solve_chain(nbr: int,
                    anchors: list[tuple[int, Pose2, np.ndarray, bool]]
                    ) -> None:
        chain = chains[nbr]
        k0 = anchors[0][0]
        place = compose(anchors[0][1], inverse(chain[k0]))
        step2 = FactorGraph()
        kfs = sorted(chain)
        for kf in kfs:
            step2.ensure_variable((nbr, kf), compose(place, chain[kf]))
        for k1, k2 in zip(kfs, kfs[1:]):
            step2.add_between((nbr, k1), (nbr, k2),
                              between(chain[k1], chain[k2]),
                              (k2 - k1) * params.relay_cov)
        for kf, pose, cov, robust in anchors:
            step2.add_prior((nbr, kf), pose, cov, robust=robust)
        reports.append(optimize(step2, params.optimize))
        for kf in kfs:
            estimates[(nbr, kf)] = step2.variables[(nbr, kf)]
        out_placements[nbr] = compose(step2.variables[(nbr, kfs[0])],
                                      inverse(chain[kfs[0]]))

    for nbr in sorted(touched):
        solve_chain(nbr, [(kf, step1.variables[(nbr, kf)],
                           anchor_cov[(nbr, kf)], False)
                          for kf in touched[nbr]])

    def relay_anchors(nbr: int) -> list[tuple[int, Pose2, np.ndarray,
                                              bool]]:
        """Anchors for nbr keyframes via already-estimated endpoints."""
        chain = chains[nbr]
        anchors = []
        for z in relayed:
            if z.local_robot == nbr and z.local_kf in chain:
                other = estimates.get((z.neighbor_robot, z.neighbor_kf))
                if other is not None:
                    anchors.append((z.local_kf,
                                    compose(other, inverse(z.measurement)),
                                    z.covariance, True))
            elif z.neighbor_robot == nbr and z.neighbor_kf in chain:
                other = estimates.get((z.local_robot, z.local_kf))
                if other is not None:
                    anchors.append((z.neighbor_kf,
                                    compose(other, z.measurement),
                                    z.covariance, True))
        return anchors

    pending = [nbr for nbr in sorted(chains)
               if chains[nbr] and nbr not in touched]
    progress = True
    while progress and pending:
        progress = False
        for nbr in list(pending):
            anchors = relay_anchors(nbr)
            if not anchors:
                continue
            solve_chain(nbr, anchors)
            pending.remove(nbr)
            progress = True

    for nbr in pending:
        place = placements.get(nbr)
        if place is None:
            continue
        for kf, pose in sorted(chains[nbr].items()):
            estimates[(nbr, kf)] = compose(place, pose)
        out_placements[nbr] = place
    return TwoStepResult(estimates=estimates, placements=out_placements,
                         reports=reports)


def full_pgo(local_robot: int, local_graph: FactorGraph,
             closures: list[LoopClosure],
             neighbor_chains: dict[int, list[tuple[int, Pose2]]],
             placements: dict[int, Pose2] | None = None,
             params: PgoParams | None = None,
             relayed: list[LoopClosure] | None = None,
             ) -> tuple[dict[Key, Pose2], OptimizationReport]:
    """Joint optimization over the local robot and full neighbor chains.

    Every neighbor with a usable closure contributes its entire relayed
    trajectory as between factors in a single solve. Relayed closures
    between two neighbors, or from a neighbor back to the local robot,
    join the graph as robust loop factors; a neighbor reachable only
    through such closures is pulled into the joint solve instead of
    being placed rigidly. With no closures and no neighbors this
    degenerates to optimizing the local graph.

    Args: as two_step_optimize.

    Returns:
        (estimates, report): poses in the local frame for every
        variable in the joint graph plus rigidly placed closure-free
        neighbors, and the solve report.
    """
    params = params or PgoParams()
    placements = dict(placements or {})
    chains = {nbr: _chain_dict(chain)
              for nbr, chain in neighbor_chains.items()}
    relayed = [z for z in (relayed or []) if z.local_robot != local_robot]
    by_nbr: dict[int, list[LoopClosure]] = {}
    for z in closures:
        if z.local_robot != local_robot:
            continue
        if z.neighbor_kf not in chains.get(z.neighbor_robot, {}):
            continue
        if (z.local_robot, z.local_kf) not in local_graph.variables:
            continue
        by_nbr.setdefault(z.neighbor_robot, []).append(z)

    graph = local_graph.copy()
    added: set[int] = set()

    def add_chain(nbr: int, place: Pose2) -> None:
        chain = chains[nbr]
        kfs = sorted(chain)
        for kf in kfs:
            graph.ensure_variable((nbr, kf), compose(place, chain[kf]))
        for k1, k2 in zip(kfs, kfs[1:]):
            graph.add_between((nbr, k1), (nbr, k2),
                              between(chain[k1], chain[k2]),
                              (k2 - k1) * params.relay_cov)
        added.add(nbr)

    for nbr in sorted(by_nbr):
        place = _initial_placement(nbr, by_nbr[nbr], local_graph,
                                   chains[nbr], placements)
        if place is not None:
            add_chain(nbr, place)
            for z in by_nbr[nbr]:
                graph.add_loop_factor((z.local_robot, z.local_kf),
                                      (nbr, z.neighbor_kf), z.measurement,
                                      z.covariance)

    # pull in chains reachable through relayed closures, transitively
    def relay_place(nbr: int) -> Pose2 | None:
        if nbr in placements:
            return placements[nbr]
        chain = chains[nbr]
        for z in relayed:
            if z.local_robot == nbr and z.local_kf in chain:
                other = graph.variables.get(
                    (z.neighbor_robot, z.neighbor_kf))
                if other is not None:
                    return compose(compose(other, inverse(z.measurement)),
                                   inverse(chain[z.local_kf]))
            if z.neighbor_robot == nbr and z.neighbor_kf in chain:
                other = graph.variables.get((z.local_robot, z.local_kf))
                if other is not None:
                    return compose(compose(other, z.measurement),
                                   inverse(chain[z.neighbor_kf]))
        return None

    def touches_graph(nbr: int) -> bool:
        for z in relayed:
            if z.local_robot == nbr and \
                    (z.neighbor_robot, z.neighbor_kf) in graph.variables:
                return True
            if z.neighbor_robot == nbr and \
                    (z.local_robot, z.local_kf) in graph.variables:
                return True
        return False

    progress = True
    while progress:
        progress = False
        for nbr in sorted(chains):
            if nbr in added or not chains[nbr] or not touches_graph(nbr):
                continue
            place = relay_place(nbr)
            if place is not None:
                add_chain(nbr, place)
                progress = True

    for z in relayed:
        ka = (z.local_robot, z.local_kf)
        kb = (z.neighbor_robot, z.neighbor_kf)
        if ka in graph.variables and kb in graph.variables:
            graph.add_loop_factor(ka, kb, z.measurement, z.covariance)

    report = optimize(graph, params.optimize)
    estimates = dict(graph.variables)
    for nbr in sorted(chains):
        if nbr in added or nbr not in placements:
            continue
        for kf, pose in sorted(chains[nbr].items()):
            estimates[(nbr, kf)] = compose(placements[nbr], pose)
    return estimates, report
