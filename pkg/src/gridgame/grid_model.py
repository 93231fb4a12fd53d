"""DC grid model: case files, measurement matrix, WLS estimator, residual.

The linearized (DC) transmission model ties bus voltage angles x to meter
readings through a measurement matrix H:

    line flow between buses i and j:   P_ij = (x_i - x_j) / R_ij
    measurement vector:                z = H x + e

with R_ij the branch reactance and e zero-mean Gaussian noise.  All internal
arithmetic is in MW: per-unit reactances from the case file are divided by
base_mva at load time, so H carries MW per radian.

The slack bus angle is pinned to zero and its column removed from H; the
state is the vector of the remaining bus angles, ordered by bus id.

The weighted-least-squares estimate and its companions are

    M = (H' L^-1 H)^-1 H' L^-1      (estimator,  x_hat = M z)
    W = I - H M                     (residual projector, rho = W z)

with L the diagonal noise covariance.  col(H) is the null space of W: any
injection of the form H d leaves the residual untouched, which is exactly
the stealth subspace an attacker exploits.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateError,
    DimensionError,
    ParseError,
    SingularError,
    UnknownBranchError,
    ValidationError,
)

PROJECTOR_TOL = 1e-9
RCOND_MIN = 1e-12


def _frozen_array(a, dtype=float):
    arr = np.array(a, dtype=dtype)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Bus:
    id: int
    name: str


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    reactance_pu: float


@dataclass(frozen=True)
class GridCase:
    """Validated grid topology. Immutable; shareable across threads."""

    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    slack_bus: int
    base_mva: float

    def __post_init__(self):
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate bus ids")
        idset = set(ids)
        if self.slack_bus not in idset:
            raise ValidationError(f"slack bus {self.slack_bus} is not a bus")
        if self.base_mva <= 0:
            raise ValidationError("base_mva must be positive")
        for k, br in enumerate(self.branches):
            if br.from_bus == br.to_bus:
                raise ValidationError(f"branch {k} is a self-loop")
            if br.from_bus not in idset or br.to_bus not in idset:
                raise ValidationError(f"branch {k} references unknown bus")
            if not br.reactance_pu > 0:
                raise ValidationError(f"branch {k} has nonpositive reactance")
        # connectivity over the branch graph
        adj = {i: set() for i in idset}
        for br in self.branches:
            adj[br.from_bus].add(br.to_bus)
            adj[br.to_bus].add(br.from_bus)
        seen = {self.slack_bus}
        stack = [self.slack_bus]
        while stack:
            for nxt in adj[stack.pop()]:
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        if seen != idset:
            missing = sorted(idset - seen)
            raise ValidationError(f"grid is not connected; unreachable buses {missing}")

    @property
    def n_buses(self):
        return len(self.buses)

    def state_bus_ids(self):
        """Non-slack bus ids in case order; defines the state indexing."""
        return [b.id for b in self.buses if b.id != self.slack_bus]

    def reactance_mw(self, branch_index):
        """Branch reactance scaled so that flow = angle difference / R is in MW."""
        return self.branches[branch_index].reactance_pu / self.base_mva

    def find_branch(self, i, j):
        """Index of the branch joining buses i and j, either orientation."""
        for k, br in enumerate(self.branches):
            if {br.from_bus, br.to_bus} == {i, j}:
                return k
        raise UnknownBranchError(f"no branch between buses {i} and {j}")


@dataclass(frozen=True)
class Meter:
    kind: str  # "line_flow" or "bus_injection"
    ref: int  # branch index for flows, bus id for injections
    label: str


@dataclass(frozen=True)
class MeterSet:
    """Ordered meter list; the order defines measurement-vector indexing."""

    meters: tuple[Meter, ...]

    def __post_init__(self):
        labels = [m.label for m in self.meters]
        if len(set(labels)) != len(labels):
            raise ValidationError("meter labels must be unique")
        for m in self.meters:
            if m.kind not in ("line_flow", "bus_injection"):
                raise ValidationError(f"unknown meter kind {m.kind!r}")

    def __len__(self):
        return len(self.meters)

    @property
    def labels(self):
        return [m.label for m in self.meters]

    def index_of(self, label):
        for i, m in enumerate(self.meters):
            if m.label == label:
                return i
        raise ValidationError(f"unknown meter label {label!r}")


@dataclass(frozen=True)
class EstimatorModel:
    """WLS estimator package: H, noise variances, M and W = I - HM.

    noise_var holds the diagonal of the covariance (MW^2).  state_dim is
    the number of non-slack buses.
    """

    H: np.ndarray
    noise_var: np.ndarray
    M: np.ndarray
    W: np.ndarray
    state_dim: int

    @property
    def n_meters(self):
        return self.H.shape[0]


@dataclass(frozen=True)
class LineSensitivity:
    """Row vector G with estimated target-line power = G . z (dimensionless)."""

    target_line: tuple[int, int]
    G: np.ndarray


@dataclass(frozen=True)
class MeasurementSample:
    z: np.ndarray
    provenance: str  # "safe" or "attacked:<id>"
    seed: int


def load_case(path):
    """Parse a case file into (GridCase, MeterSet).

    The file is a JSON document with keys base_mva, slack_bus, buses,
    branches and meters; see the shipped pjm5.json for the layout.
    """
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ParseError(f"case file not found: {path}")
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: line {e.lineno}: {e.msg}")

    def need(obj, key, where):
        if key not in obj:
            raise ParseError(f"{path}: missing field {key!r} in {where}")
        return obj[key]

    try:
        buses = tuple(
            Bus(id=int(need(b, "id", "bus")), name=str(b.get("name", f"bus{b.get('id')}")))
            for b in need(raw, "buses", "case")
        )
        branches = tuple(
            Branch(
                from_bus=int(need(br, "from", f"branch {k}")),
                to_bus=int(need(br, "to", f"branch {k}")),
                reactance_pu=float(need(br, "reactance_pu", f"branch {k}")),
            )
            for k, br in enumerate(need(raw, "branches", "case"))
        )
        case = GridCase(
            buses=buses,
            branches=branches,
            slack_bus=int(need(raw, "slack_bus", "case")),
            base_mva=float(need(raw, "base_mva", "case")),
        )
        meters = MeterSet(
            meters=tuple(
                Meter(
                    kind=str(need(m, "kind", f"meter {k}")),
                    ref=int(need(m, "ref", f"meter {k}")),
                    label=str(need(m, "label", f"meter {k}")),
                )
                for k, m in enumerate(need(raw, "meters", "case"))
            )
        )
    except (TypeError, ValueError) as e:
        raise ParseError(f"{path}: {e}")
    # meter references must resolve
    bus_ids = {b.id for b in case.buses}
    for m in meters.meters:
        if m.kind == "line_flow" and not 0 <= m.ref < len(case.branches):
            raise ValidationError(f"meter {m.label}: branch index {m.ref} out of range")
        if m.kind == "bus_injection" and m.ref not in bus_ids:
            raise ValidationError(f"meter {m.label}: unknown bus {m.ref}")
    return case, meters


def _flow_row(case, branch_index, colof, sign=1.0):
    """Row of H for the flow on a branch, oriented from->to, into `row`."""
    br = case.branches[branch_index]
    r = case.reactance_mw(branch_index)
    row = np.zeros(len(colof))
    if br.from_bus in colof:
        row[colof[br.from_bus]] += sign / r
    if br.to_bus in colof:
        row[colof[br.to_bus]] -= sign / r
    return row


def build_jacobian(case, meters):
    """Measurement matrix H, shape (n_meters, n_buses - 1), MW per radian.

    A flow meter on branch (f, t) reads (x_f - x_t)/R.  An injection meter
    at bus b reads the sum of flows oriented out of b (net export positive).
    """
    state = case.state_bus_ids()
    colof = {b: i for i, b in enumerate(state)}
    rows = []
    for m in meters.meters:
        if m.kind == "line_flow":
            rows.append(_flow_row(case, m.ref, colof))
        else:
            row = np.zeros(len(state))
            for k, br in enumerate(case.branches):
                if br.from_bus == m.ref:
                    row += _flow_row(case, k, colof)
                elif br.to_bus == m.ref:
                    row -= _flow_row(case, k, colof)
            rows.append(row)
    H = np.array(rows)
    if H.size == 0 or np.linalg.matrix_rank(H) < len(state):
        raise DegenerateError(
            f"measurement set leaves the system unobservable "
            f"(rank {0 if H.size == 0 else np.linalg.matrix_rank(H)} < {len(state)})"
        )
    return H


def build_estimator(H, noise_cov):
    """Assemble the WLS estimator for H and a diagonal noise covariance.

    noise_cov may be the diagonal as a vector or a full diagonal matrix.
    Solves (H' L^-1 H) M = H' L^-1 by dense factorization rather than
    forming the inverse explicitly.
    """
    H = np.asarray(H, dtype=float)
    lam = np.asarray(noise_cov, dtype=float)
    if lam.ndim == 2:
        lam = np.diag(lam)
    if lam.shape != (H.shape[0],):
        raise DimensionError(
            f"noise covariance diagonal has length {lam.shape}, expected {H.shape[0]}"
        )
    if np.any(lam <= 0):
        raise SingularError("noise variances must be strictly positive")
    Li = 1.0 / lam
    A = H.T @ (Li[:, None] * H)
    # reciprocal condition via SVD; guards the solve below
    s = np.linalg.svd(A, compute_uv=False)
    if s[0] <= 0 or s[-1] / s[0] < RCOND_MIN:
        raise SingularError(
            f"weighted normal matrix is numerically singular (rcond {s[-1] / s[0]:.2e})"
        )
    M = np.linalg.solve(A, H.T * Li[None, :])
    W = np.eye(H.shape[0]) - H @ M
    model = EstimatorModel(
        H=_frozen_array(H),
        noise_var=_frozen_array(lam),
        M=_frozen_array(M),
        W=_frozen_array(W),
        state_dim=H.shape[1],
    )
    _check_projector_identities(model)
    return model


def _check_projector_identities(model):
    n = model.state_dim
    err_mh = np.max(np.abs(model.M @ model.H - np.eye(n)))
    err_ww = np.max(np.abs(model.W @ model.W - model.W))
    err_wh = np.max(np.abs(model.W @ model.H))
    if max(err_mh, err_ww, err_wh) > PROJECTOR_TOL:
        raise SingularError(
            f"estimator identities violated: |MH-I|={err_mh:.2e} "
            f"|WW-W|={err_ww:.2e} |WH|={err_wh:.2e}"
        )


def line_sensitivity(model, case, line):
    """Sensitivity G of the estimated flow on `line` to the measurements.

    G = (M_i - M_j) / R_ij with M_i the estimator row for bus i's angle;
    the slack row is identically zero.  estimated_line_power(G, z) then
    equals (x_hat_i - x_hat_j) / R_ij for x_hat = M z.
    """
    i, j = line
    k = case.find_branch(i, j)
    r = case.reactance_mw(k)
    state = case.state_bus_ids()
    rowof = {b: idx for idx, b in enumerate(state)}
    m = model.n_meters
    Mi = model.M[rowof[i]] if i in rowof else np.zeros(m)
    Mj = model.M[rowof[j]] if j in rowof else np.zeros(m)
    G = (Mi - Mj) / r
    if np.max(np.abs(G)) <= 1e-14:
        raise DegenerateError(f"line {line} has an identically zero sensitivity")
    return LineSensitivity(target_line=(i, j), G=_frozen_array(G))


def simulate_measurements(case, meters, x, noise_sigma, seed):
    """Draw z = H x + e with e ~ N(0, noise_sigma^2 I), fixed by `seed`."""
    H = build_jacobian(case, meters)
    x = np.asarray(x, dtype=float)
    if x.shape != (H.shape[1],):
        raise DimensionError(f"state has shape {x.shape}, expected ({H.shape[1]},)")
    if noise_sigma < 0:
        raise DimensionError("noise_sigma must be nonnegative")
    rng = np.random.default_rng(seed)
    e = rng.normal(0.0, noise_sigma, size=H.shape[0]) if noise_sigma > 0 else np.zeros(H.shape[0])
    return MeasurementSample(z=_frozen_array(H @ x + e), provenance="safe", seed=seed)


def estimate_state(model, z):
    """x_hat = M z."""
    z = np.asarray(z, dtype=float)
    if z.shape != (model.n_meters,):
        raise DimensionError(f"z has shape {z.shape}, expected ({model.n_meters},)")
    return model.M @ z


def residual(model, z):
    """Residual rho = W z and its Euclidean norm (MW)."""
    z = np.asarray(z, dtype=float)
    if z.shape != (model.n_meters,):
        raise DimensionError(f"z has shape {z.shape}, expected ({model.n_meters},)")
    rho = model.W @ z
    return rho, float(np.linalg.norm(rho))


def estimated_line_power(sensitivity, z):
    """Estimated target-line power G . z in MW; linear in z."""
    G = sensitivity.G if isinstance(sensitivity, LineSensitivity) else np.asarray(sensitivity)
    z = np.asarray(z, dtype=float)
    if z.shape != G.shape:
        raise DimensionError(f"z has shape {z.shape}, expected {G.shape}")
    return float(G @ z)


def dc_state_from_injections(case, injections):
    """Bus angles (non-slack, case order) of a DC flow for net injections.

    `injections` maps bus id -> net MW injection (generation minus load);
    buses not listed inject zero.  The slack bus balances the system, so
    its entry, if present, is ignored.
    """
    state = case.state_bus_ids()
    colof = {b: i for i, b in enumerate(state)}
    n = len(state)
    B = np.zeros((n, n))
    for k, br in enumerate(case.branches):
        y = 1.0 / case.reactance_mw(k)
        f, t = br.from_bus, br.to_bus
        if f in colof:
            B[colof[f], colof[f]] += y
        if t in colof:
            B[colof[t], colof[t]] += y
        if f in colof and t in colof:
            B[colof[f], colof[t]] -= y
            B[colof[t], colof[f]] -= y
    p = np.zeros(n)
    for b, mw in injections.items():
        b = int(b)
        if b == case.slack_bus:
            continue
        if b not in colof:
            raise ValidationError(f"injection at unknown bus {b}")
        p[colof[b]] = float(mw)
    try:
        return np.linalg.solve(B, p)
    except np.linalg.LinAlgError:
        raise SingularError("susceptance matrix is singular; case not usable for DC flow")
