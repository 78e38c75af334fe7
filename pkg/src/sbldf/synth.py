"""Seeded generators for dictionaries, sparse signals, predictions and tracking data.

Every generator is a pure function of its parameters and an integer seed.
Random draws come from a Philox counter-based generator; each kind of draw
uses its own stream, derived as ``SeedSequence(seed, spawn_key=(stream,))``,
so that e.g. changing the dictionary model never shifts the noise draws.
Per-trial seeds are ``base_seed ^ trial``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import Dictionary, DomainError

# stream ids
_S_BASE, _S_SCALE, _S_REF, _S_SUPPORT, _S_NOISE, _S_CORRUPT, _S_TRACK = range(7)

DICT_KINDS = ("iid", "iid_scaled", "local_coherent", "local_coherent_scaled")
SIGNAL_KINDS = ("gaussian_nonzeros", "unit_nonzeros")


def rng_for(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=(int(stream),))))


def trial_seed(base: int, trial: int) -> int:
    return int(base) ^ int(trial)


@dataclass(frozen=True)
class DictModel:
    """Dictionary structure.

    ``structure_c=None`` selects the fixed presets (column scales U[0, 1],
    block off-diagonal 0.8); a number c >= 1 uses scales U[1/c, 1] and
    off-diagonal 1 - 1/c, so c = 1 is the plain i.i.d. model.
    """

    kind: str = "iid"
    structure_c: float | None = None
    block_size: int = 4

    def __post_init__(self):
        if self.kind not in DICT_KINDS:
            raise DomainError(f"unknown dictionary kind {self.kind!r}")
        if self.structure_c is not None and not self.structure_c >= 1:
            raise DomainError("structure_c must be >= 1")
        if self.block_size < 1:
            raise DomainError("block_size must be >= 1")

    @property
    def scaled(self) -> bool:
        return self.kind in ("iid_scaled", "local_coherent_scaled")

    @property
    def blocked(self) -> bool:
        return self.kind in ("local_coherent", "local_coherent_scaled")

    def off_diagonal(self) -> float:
        return 0.8 if self.structure_c is None else 1.0 - 1.0 / self.structure_c

    def scale_low(self) -> float:
        return 0.0 if self.structure_c is None else 1.0 / self.structure_c


@dataclass(frozen=True)
class SignalModel:
    kind: str = "gaussian_nonzeros"
    s: int = 1

    def __post_init__(self):
        if self.kind not in SIGNAL_KINDS:
            raise DomainError(f"unknown signal kind {self.kind!r}")
        if self.s < 1:
            raise DomainError("sparsity must be >= 1")


def block_matrix(n, block_size, off):
    if n % block_size:
        raise DomainError(f"block size {block_size} does not divide n={n}")
    blk = np.full((block_size, block_size), off)
    np.fill_diagonal(blk, 1.0)
    return np.kron(np.eye(n // block_size), blk)


def gen_dictionary(m: int, n: int, model: DictModel = DictModel(), seed: int = 0) -> Dictionary:
    """Gaussian base matrix with optional block coherence and column scaling.

    Base entries are N(0, 1/sqrt(M)) (variance 1/sqrt(M)). Structured models
    multiply by a block matrix B and/or a diagonal D, then rescale by
    ||Phi_base x_ref|| / ||Phi x_ref|| for a seeded Gaussian x_ref so the
    measurement energy matches the unstructured model.
    """
    if m < 1 or n < 1:
        raise DomainError("dimensions must be positive")
    base = rng_for(seed, _S_BASE).normal(0.0, m ** -0.25, size=(m, n))
    phi = base
    if model.blocked and model.off_diagonal() != 0.0:
        phi = phi @ block_matrix(n, model.block_size, model.off_diagonal())
    elif model.blocked and n % model.block_size:
        raise DomainError(f"block size {model.block_size} does not divide n={n}")
    if model.scaled:
        d = rng_for(seed, _S_SCALE).uniform(model.scale_low(), 1.0, size=n)
        if np.any(d != 1.0):
            phi = phi * d
    if phi is not base:
        x_ref = rng_for(seed, _S_REF).normal(size=n)
        phi = phi * (np.linalg.norm(base @ x_ref) / np.linalg.norm(phi @ x_ref))
    return Dictionary(phi)


def gen_sparse_signal(n: int, model: SignalModel, seed: int = 0) -> np.ndarray:
    if model.s > n:
        raise DomainError(f"sparsity {model.s} exceeds length {n}")
    rng = rng_for(seed, _S_SUPPORT)
    support = rng.choice(n, size=model.s, replace=False)
    x = np.zeros(n)
    if model.kind == "gaussian_nonzeros":
        x[support] = rng.normal(size=model.s)
        # a zero draw would break the support count; vanishingly rare
        while np.count_nonzero(x) < model.s:
            x[support[x[support] == 0]] = rng.normal(size=int(np.sum(x[support] == 0)))
    else:
        x[support] = 1.0
    return x


def measure(dictionary: Dictionary, x, sigma_obs2: float, seed: int = 0) -> np.ndarray:
    """y = Phi x + e with e ~ N(0, sigma_obs2 I)."""
    if sigma_obs2 < 0:
        raise DomainError("noise variance must be nonnegative")
    y = dictionary.phi @ np.asarray(x, dtype=float)
    if sigma_obs2 > 0:
        y = y + np.sqrt(sigma_obs2) * rng_for(seed, _S_NOISE).normal(size=dictionary.m)
    return y


def corrupt_prediction(x, support_swaps=None, sigma_dyn2=0.0, swap_prob=None, seed=0) -> np.ndarray:
    """Move nonzeros of x onto zero positions, then add N(0, sigma_dyn2) everywhere.

    Either ``support_swaps`` (an exact count) or ``swap_prob`` (each nonzero
    moves independently with this probability) selects the nonzeros to move;
    their destinations are distinct zero positions drawn uniformly.
    """
    x = np.asarray(x, dtype=float)
    if (support_swaps is None) == (swap_prob is None):
        raise DomainError("give exactly one of support_swaps and swap_prob")
    if sigma_dyn2 < 0:
        raise DomainError("dynamics noise variance must be nonnegative")
    rng = rng_for(seed, _S_CORRUPT)
    nz = np.flatnonzero(x)
    zeros = np.flatnonzero(x == 0)
    if support_swaps is not None:
        k = int(support_swaps)
        if k < 0 or k > nz.size or k > zeros.size:
            raise DomainError(f"cannot swap {k} entries with {nz.size} nonzeros and {zeros.size} zeros")
        src = rng.choice(nz, size=k, replace=False) if k else np.zeros(0, dtype=int)
    else:
        if not 0 <= swap_prob <= 1:
            raise DomainError("swap_prob must lie in [0, 1]")
        src = nz[rng.random(nz.size) < swap_prob]
        src = src[: zeros.size]
    dst = rng.choice(zeros, size=src.size, replace=False) if src.size else np.zeros(0, dtype=int)
    out = x.copy()
    out[dst] = x[src]
    out[src] = 0.0
    if sigma_dyn2 > 0:
        out = out + np.sqrt(sigma_dyn2) * rng.normal(size=x.size)
    return out


@dataclass
class TrackingDataset:
    """Ground truth, measurements and nominal dynamics of a tracking run.

    ``F[t-1]`` maps x^(t) to the nominal x^(t+1) (zero-based t), i.e. each
    target at time t moved one index in its assigned direction; columns of
    non-target positions are identity.
    """

    x_true: np.ndarray  # (L, N)
    y: np.ndarray  # (L, M)
    F: np.ndarray  # (L-1, N, N)
    directions: np.ndarray  # (s,)
    innovation_prob: float
    sigma_obs2: float
    seed: int
    dictionary: Dictionary | None = None
    meta: dict = field(default_factory=dict)

    @property
    def steps(self) -> int:
        return self.x_true.shape[0]


def _resolve_moves(pos, step, n):
    """Apply one move per target in order; a move onto an occupied index is deferred."""
    new = pos.copy()
    occupied = set(int(p) for p in pos)
    for k in range(pos.size):
        dest = int((pos[k] + step[k]) % n)
        if dest in occupied:
            continue
        occupied.discard(int(pos[k]))
        occupied.add(dest)
        new[k] = dest
    return new


def shift_matrix(n, pos, new_pos):
    """Identity except that column p becomes e_q for every target moved p -> q."""
    F = np.eye(n)
    for p, q in zip(pos, new_pos):
        if p != q:
            F[:, p] = 0.0
            F[q, p] = 1.0
    return F


def gen_tracking(
    n: int,
    s: int,
    L: int,
    innovation_prob: float,
    seed: int = 0,
    *,
    m: int | None = None,
    dict_model: DictModel = DictModel(),
    sigma_obs2: float = 0.0,
) -> TrackingDataset:
    """Moving-target sequence with sparse direction innovations.

    Targets start with N(0, 1) amplitudes (|x| < 0.1 clamped to 0.1 sign(x))
    and fixed directions; each step a target moves one index in its direction,
    or the opposite way with probability ``innovation_prob``. Positions wrap
    circularly. If ``m`` is given a dictionary is drawn and measurements made.
    """
    if L < 1 or s < 1 or s > n:
        raise DomainError("need L >= 1 and 1 <= s <= n")
    rng = rng_for(seed, _S_TRACK)
    pos = rng.choice(n, size=s, replace=False)
    amp = rng.normal(size=s)
    small = np.abs(amp) < 0.1
    amp[small] = 0.1 * np.where(amp[small] < 0, -1.0, 1.0)
    dirs = rng.choice(np.array([-1, 1]), size=s)
    X = np.zeros((L, n))
    X[0, pos] = amp
    Fs = np.zeros((max(L - 1, 0), n, n))
    for t in range(1, L):
        flip = rng.random(s) < innovation_prob
        nominal = _resolve_moves(pos, dirs, n)
        Fs[t - 1] = shift_matrix(n, pos, nominal)
        pos = _resolve_moves(pos, np.where(flip, -dirs, dirs), n)
        X[t, pos] = amp
    ds = TrackingDataset(
        x_true=X,
        y=np.zeros((L, 0)),
        F=Fs,
        directions=dirs,
        innovation_prob=float(innovation_prob),
        sigma_obs2=float(sigma_obs2),
        seed=int(seed),
    )
    if m is not None:
        D = gen_dictionary(m, n, dict_model, seed)
        ds.dictionary = D
        ds.y = np.stack([measure(D, X[t], sigma_obs2, trial_seed(seed, 1000 + t)) for t in range(L)])
    return ds


# ---------------------------------------------------------------------------
# flat binary container
#
# file   := MAGIC u32:count record*
# record := u16:name_len name(utf-8) u32:ndim u64:dim*ndim payload
# payload is little-endian float64 in row-major order.

MAGIC = b"SBLDFBIN"


def write_container(path, arrays: dict):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            a = np.ascontiguousarray(arr, dtype="<f8")
            key = name.encode("utf-8")
            fh.write(struct.pack("<H", len(key)))
            fh.write(key)
            fh.write(struct.pack("<I", a.ndim))
            fh.write(struct.pack(f"<{a.ndim}Q", *a.shape))
            fh.write(a.tobytes(order="C"))


def read_container(path) -> dict:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a container file")
    off = 8
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    out = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + klen].decode("utf-8")
        off += klen
        (ndim,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}Q", data, off)
        off += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shape).copy()
        off += 8 * size
    return out


def save_tracking(ds: TrackingDataset, path):
    arrays = {
        "x_true": ds.x_true,
        "y": ds.y,
        "F": ds.F,
        "directions": ds.directions.astype(float),
        "params": np.array([ds.innovation_prob, ds.sigma_obs2, float(ds.seed)]),
    }
    if ds.dictionary is not None:
        arrays["phi"] = ds.dictionary.phi
    write_container(path, arrays)


def load_tracking(path) -> TrackingDataset:
    a = read_container(path)
    p = a["params"]
    return TrackingDataset(
        x_true=a["x_true"],
        y=a["y"],
        F=a["F"],
        directions=a["directions"].astype(int),
        innovation_prob=float(p[0]),
        sigma_obs2=float(p[1]),
        seed=int(p[2]),
        dictionary=Dictionary(a["phi"]) if "phi" in a else None,
    )
