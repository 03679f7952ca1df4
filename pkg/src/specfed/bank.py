"""Server-side spectral knowledge bank.

Prototypes live in insertion order.  Retrieval is an exact cosine scan with
ties broken by lowest position.  Insertion projects every stored vector onto
the ball of radius ``rho``.  Pruning drops prototypes whose retrieval
frequency over the trailing ``window`` rounds falls below ``delta``.

Round bookkeeping: queries recorded while ``bank.round == r`` belong to round
``r``.  A prototype inserted during round ``r`` has been resident for
``bank.round - r`` rounds and only sees queries from later rounds.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .exceptions import ConfigError, ContractError, EmptyBankError
from .spectral import SpectralToken


@dataclass(frozen=True)
class RetrievalResult:
    prototypes: np.ndarray  # (k, d)
    similarities: np.ndarray  # (k,), descending
    indices: np.ndarray  # (k,) bank positions


def cosine_similarities(prototypes: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """``(Q, M)`` cosine similarities; zero-norm vectors score 0.

    Element-wise products are reduced along the last axis so identical
    prototypes always receive bit-identical scores.
    """
    p = np.asarray(prototypes, dtype=np.float64)
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    dots = (q[:, None, :] * p[None, :, :]).sum(axis=-1)
    pn = np.sqrt((p * p).sum(axis=-1))
    qn = np.sqrt((q * q).sum(axis=-1))
    denom = qn[:, None] * pn[None, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        sims = np.where(denom > 0, dots / np.where(denom > 0, denom, 1.0), 0.0)
    return np.clip(sims, -1.0, 1.0)


def topk_indices(prototypes: np.ndarray, queries: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices and similarities of the ``k`` best prototypes per query row."""
    if k < 1:
        raise ContractError(f"top_k must be >= 1, got {k}")
    sims = cosine_similarities(prototypes, queries)
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    return order, np.take_along_axis(sims, order, axis=1)


def barycenter(result: RetrievalResult) -> np.ndarray:
    """Raw (un-normalised) mean of the retrieved prototypes."""
    protos = np.asarray(result.prototypes)
    if protos.shape[0] < 1:
        raise ContractError("barycenter of an empty retrieval")
    return protos.mean(axis=0)


def _norm_bound(v: np.ndarray) -> float:
    """Largest of the common ways to evaluate ``||v||``; they can differ in the last ulp."""
    return max(float(np.sqrt(v @ v)), float(np.sqrt(np.sum(v * v))), float(np.linalg.norm(v)))


def project_to_ball(v: np.ndarray, rho: float) -> np.ndarray:
    """Rescale onto the radius-``rho`` ball; the result passes ``norm <= rho`` however it is summed."""
    norm = _norm_bound(v)
    if norm <= rho:
        return v
    out = v * (rho / norm)
    while _norm_bound(out) > rho:
        out = out * (1.0 - 2.0 ** -52)
    return out


class KnowledgeBank:
    def __init__(self, dim: int, rho: float = 1.0, delta: float = 0.05, window: int = 5,
                 max_size: int | None = 512):
        if rho <= 0:
            raise ConfigError(f"rho must be positive, got {rho}", "federation.rho")
        if not 0.0 <= delta <= 1.0:
            raise ConfigError(f"delta must lie in [0, 1], got {delta}", "federation.delta")
        if window < 1:
            raise ConfigError(f"window must be >= 1, got {window}", "federation.window")
        self.dim = int(dim)
        self.rho = float(rho)
        self.delta = float(delta)
        self.window = int(window)
        self.max_size = max_size
        self.round = 0
        self._next_id = 0
        self._vectors: list[np.ndarray] = []
        self._ids: list[int] = []
        self._sources: list[int] = []
        self._inserted: list[int] = []
        self._counts: list[int] = []
        self._served: list[int] = []
        self._hits: list[dict[int, int]] = []
        self._round_queries: dict[int, int] = {}

    # ------------------------------------------------------------ inspection
    def __len__(self) -> int:
        return len(self._vectors)

    @property
    def prototypes(self) -> np.ndarray:
        if not self._vectors:
            return np.zeros((0, self.dim))
        return np.stack(self._vectors)

    @property
    def ids(self) -> list[int]:
        return list(self._ids)

    @property
    def retrieval_counts(self) -> np.ndarray:
        return np.array(self._counts, dtype=np.int64)

    @property
    def queries_served(self) -> np.ndarray:
        return np.array(self._served, dtype=np.int64)

    @property
    def rounds_resident(self) -> np.ndarray:
        return self.round - np.array(self._inserted, dtype=np.int64)

    def snapshot(self) -> np.ndarray:
        """Read-only copy of the prototype matrix for a round's local updates."""
        snap = self.prototypes.copy()
        snap.setflags(write=False)
        return snap

    # -------------------------------------------------------------- retrieval
    def retrieve_topk(self, query, k: int, record: bool = True) -> RetrievalResult:
        if not self._vectors:
            raise EmptyBankError("knowledge bank is empty")
        q = query.values if isinstance(query, SpectralToken) else np.asarray(query, dtype=np.float64)
        protos = self.prototypes
        idx, sims = topk_indices(protos, q[None], k)
        idx, sims = idx[0], sims[0]
        if record:
            self._record(idx)
        return RetrievalResult(protos[idx], sims, idx)

    def _record(self, returned: Iterable[int]) -> None:
        self._round_queries[self.round] = self._round_queries.get(self.round, 0) + 1
        for i in range(len(self._served)):
            self._served[i] += 1
        for i in returned:
            self._counts[i] += 1
            self._hits[i][self.round] = self._hits[i].get(self.round, 0) + 1

    # ------------------------------------------------------------ mutation
    def insert_and_project(self, tokens: Sequence) -> None:
        """Append tokens (ascending client id) then project the bank onto the rho-ball.

        ``tokens`` holds :class:`SpectralToken` objects or ``(client_id, vector)``
        pairs.
        """
        entries = []
        for pos, tok in enumerate(tokens):
            if isinstance(tok, SpectralToken):
                cid, vec = tok.source_client, tok.values
            else:
                cid, vec = tok
            vec = np.array(vec, dtype=np.float64).reshape(-1)
            if vec.shape != (self.dim,):
                raise ContractError(f"token has dimension {vec.shape}, bank expects {self.dim}")
            if not np.all(np.isfinite(vec)):
                raise ContractError("token contains non-finite values")
            entries.append((pos if cid is None else cid, pos, vec))
        entries.sort(key=lambda e: (e[0], e[1]))
        for cid, _, vec in entries:
            self._vectors.append(vec)
            self._ids.append(self._next_id)
            self._sources.append(int(cid))
            self._inserted.append(self.round)
            self._counts.append(0)
            self._served.append(0)
            self._hits.append({})
            self._next_id += 1
        self._vectors = [project_to_ball(v, self.rho) for v in self._vectors]
        if self.max_size is not None and len(self) > self.max_size:
            self._evict(len(self) - self.max_size)

    def _evict(self, n: int) -> None:
        def key(i):
            served = self._served[i]
            freq = self._counts[i] / served if served else np.inf
            return (freq, self._inserted[i], self._ids[i])

        doomed = set(sorted(range(len(self)), key=key)[:n])
        self._keep([i for i in range(len(self)) if i not in doomed])

    def window_frequency(self, i: int) -> float | None:
        """Hits over queries in the trailing window; ``None`` if no queries were served."""
        lo = self.round - self.window + 1
        queries = sum(self._round_queries.get(r, 0) for r in range(lo, self.round + 1))
        if queries == 0:
            return None
        hits = sum(c for r, c in self._hits[i].items() if r >= lo)
        return hits / queries

    def prune(self, window: int | None = None) -> list[int]:
        """Remove stale, rarely retrieved prototypes; returns the removed ids."""
        if window is not None:
            if window < 1:
                raise ConfigError(f"window must be >= 1, got {window}", "federation.window")
            self.window = int(window)
        resident = self.rounds_resident
        keep, removed = [], []
        for i in range(len(self)):
            freq = self.window_frequency(i)
            retrieved_now = self.round in self._hits[i]
            if (self.delta > 0 and resident[i] >= self.window and not retrieved_now
                    and freq is not None and freq < self.delta):
                removed.append(self._ids[i])
            else:
                keep.append(i)
        self._keep(keep)
        return removed

    def _keep(self, keep: list[int]) -> None:
        for attr in ("_vectors", "_ids", "_sources", "_inserted", "_counts", "_served", "_hits"):
            seq = getattr(self, attr)
            setattr(self, attr, [seq[i] for i in keep])

    def advance_round(self) -> None:
        self.round += 1
        horizon = self.round - self.window
        self._round_queries = {r: c for r, c in self._round_queries.items() if r > horizon}
        for hits in self._hits:
            for r in [r for r in hits if r <= horizon]:
                del hits[r]

    # ---------------------------------------------------------- persistence
    def to_state(self) -> tuple[dict, dict[str, np.ndarray]]:
        meta = {
            "dim": self.dim, "rho": self.rho, "delta": self.delta, "window": self.window,
            "max_size": self.max_size, "round": self.round, "next_id": self._next_id,
            "ids": self._ids, "sources": self._sources, "inserted": self._inserted,
            "counts": self._counts, "served": self._served,
            "hits": [sorted(h.items()) for h in self._hits],
            "round_queries": sorted(self._round_queries.items()),
        }
        return meta, {"prototypes": self.prototypes}

    @classmethod
    def from_state(cls, meta: dict, arrays: dict[str, np.ndarray]) -> KnowledgeBank:
        bank = cls(meta["dim"], meta["rho"], meta["delta"], meta["window"], meta["max_size"])
        bank.round = meta["round"]
        bank._next_id = meta["next_id"]
        bank._vectors = [row.copy() for row in np.asarray(arrays["prototypes"], dtype=np.float64)]
        bank._ids = list(meta["ids"])
        bank._sources = list(meta["sources"])
        bank._inserted = list(meta["inserted"])
        bank._counts = list(meta["counts"])
        bank._served = list(meta["served"])
        bank._hits = [{int(r): int(c) for r, c in h} for h in meta["hits"]]
        bank._round_queries = {int(r): int(c) for r, c in meta["round_queries"]}
        return bank

    def save(self, path) -> None:
        from .io import write_container
        meta, arrays = self.to_state()
        write_container(path, "bank", meta, arrays)

    @classmethod
    def load(cls, path) -> KnowledgeBank:
        from .io import read_container
        meta, arrays = read_container(path, expected_kind="bank")
        return cls.from_state(meta, arrays)
