"""Round orchestration: client sampling, local updates, aggregation, bank upkeep.

Only three kinds of values cross the client/server boundary: parameter sets,
spectral tokens and scalar metrics (see :class:`ClientUpdate`).  Images and
targets stay inside :class:`ClientData`.

Every random draw comes from a generator keyed on ``(seed, round, client,
stream)``, so results do not depend on how clients are scheduled.
"""
from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .bank import KnowledgeBank, topk_indices
from .exceptions import ClientError, ConfigError, ContractError
from .metrics import task_metrics
from .models import ModelConfig, OmniModel, task_loss
from .tensor import SGD, Tensor

SAMPLE_STREAM = 101
SHUFFLE_STREAM = 17


@dataclass
class RoundConfig:
    num_clients: int = 4
    rounds: int = 10
    participation: float = 1.0
    local_epochs: int = 2
    lr: float = 0.05
    lam: float = 0.1
    top_k: int = 2
    batch_size: int = 16
    rho: float = 1.0
    delta: float = 0.05
    window: int = 5
    max_size: int | None = 512
    seed: int = 0

    def __post_init__(self):
        checks = (
            ("num_clients", self.num_clients >= 1),
            ("rounds", self.rounds >= 0),
            ("participation", 0.0 < self.participation <= 1.0),
            ("local_epochs", self.local_epochs >= 1),
            ("lr", self.lr > 0),
            ("lambda", self.lam >= 0),
            ("top_k", self.top_k >= 1),
            ("batch_size", self.batch_size >= 1),
            ("rho", self.rho > 0),
            ("delta", 0.0 <= self.delta <= 1.0),
            ("window", self.window >= 1),
        )
        for key, ok in checks:
            if not ok:
                raise ConfigError(f"invalid federation.{key}", f"federation.{key}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> RoundConfig:
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class ClientData:
    x_train: np.ndarray
    y_train: np.ndarray
    d_train: np.ndarray  # spectral descriptors
    x_test: np.ndarray
    y_test: np.ndarray
    d_test: np.ndarray


@dataclass
class ClientState:
    client_id: int
    shard: np.ndarray
    modality_mix: dict[int, int]
    personal: dict[str, np.ndarray]
    data: ClientData = field(repr=False)

    @property
    def n_k(self) -> int:
        return len(self.data.y_train)


@dataclass
class ClientUpdate:
    """Everything a client sends to the server after a local update."""

    client_id: int
    shared: dict[str, np.ndarray]
    n_k: int
    token: np.ndarray
    metrics: dict[str, float]


@dataclass
class RoundReport:
    round: int
    records: list[tuple[int, str, float]]  # (client_id, metric, value)
    bank_size: int
    participants: list[int]


def sample_clients(num_clients: int, ratio: float, seed: int, round_index: int) -> list[int]:
    """``ceil(ratio * K)`` distinct clients, uniform, ascending id order."""
    if not 0.0 < ratio <= 1.0:
        raise ConfigError(f"participation ratio must lie in (0, 1], got {ratio}", "federation.participation")
    m = min(num_clients, max(1, math.ceil(ratio * num_clients - 1e-9)))
    if m == num_clients:
        return list(range(num_clients))
    rng = np.random.default_rng([seed, round_index, SAMPLE_STREAM])
    return sorted(int(i) for i in rng.choice(num_clients, size=m, replace=False))


def spalign_loss(s: Tensor, S_g: np.ndarray) -> Tensor:
    """Squared distance from token(s) to the barycenter of their prototypes.

    ``s`` is ``(d,)`` with ``S_g`` ``(k, d)``, or ``(B, d)`` with ``(B, k, d)``;
    batched input returns the batch mean.
    """
    S_g = np.asarray(S_g, dtype=np.float64)
    if S_g.shape[-2] < 1:
        raise ContractError("spalign_loss needs at least one prototype")
    diff = s - S_g.mean(axis=-2)
    sq = (diff * diff).sum(axis=-1)
    return sq.mean() if sq.ndim else sq


def make_retriever(snapshot: np.ndarray, k: int, mode: str = "topk"):
    """Map token values ``(B, d)`` to prototypes ``(B, k', d)`` from a frozen bank.

    An empty bank returns the query replicated ``k`` times.  ``mode="mean"``
    returns the bank mean as a single prototype.
    """
    if len(snapshot) == 0:
        return lambda t: np.repeat(t[:, None, :], k, axis=1)
    if mode == "mean":
        mean = snapshot.mean(axis=0)
        return lambda t: np.broadcast_to(mean, (t.shape[0], 1, mean.shape[0])).copy()
    return lambda t: snapshot[topk_indices(snapshot, t, k)[0]]


def _normalize(v: np.ndarray) -> np.ndarray:
    n = float(np.sqrt(v @ v))
    if n == 0.0:
        out = np.zeros_like(v)
        out[0] = 1.0
        return out
    return v / n


def local_update(client: ClientState, global_shared: dict[str, np.ndarray], snapshot: np.ndarray,
                 config: RoundConfig, model_config: ModelConfig, round_index: int
                 ) -> tuple[ClientState, ClientUpdate]:
    """Train one client for ``local_epochs`` epochs on task loss + lambda * SPAlign."""
    data = client.data
    n = len(data.y_train)
    if n == 0:
        raise ConfigError(f"client {client.client_id} has an empty training shard")
    model = OmniModel(model_config, config.seed, client.client_id)
    model.load(global_shared, client.personal)
    opt = SGD(model.parameters(), config.lr)
    retrieve = make_retriever(snapshot, config.top_k, model_config.retrieval)
    rng = np.random.default_rng([config.seed, round_index, client.client_id, SHUFFLE_STREAM])

    last_tokens, last_losses = [], []
    for epoch in range(config.local_epochs):
        order = rng.permutation(n)
        final = epoch == config.local_epochs - 1
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            opt.zero_grad()
            pred, tokens, protos = model(data.x_train[idx], data.d_train[idx], retrieve)
            loss = task_loss(pred, data.y_train[idx], model_config.task)
            if config.lam:
                loss = loss + config.lam * spalign_loss(tokens, protos)
            loss.backward()
            opt.step()
            if final:
                last_tokens.append(tokens.data)
                last_losses.append(loss.item() * len(idx))

    token = _normalize(np.concatenate(last_tokens).mean(axis=0))
    metrics = {"train_loss": float(np.sum(last_losses) / n)}
    updated = replace(client, personal=model.personal_state())
    return updated, ClientUpdate(client.client_id, model.shared_state(), n, token, metrics)


def aggregate_backbones(updates: list[dict[str, np.ndarray]], weights) -> dict[str, np.ndarray]:
    """Weighted element-wise mean with weights ``n_k / sum(n_k)``, accumulated in list order."""
    if not updates:
        raise ContractError("no updates to aggregate")
    weights = [float(w) for w in weights]
    if len(weights) != len(updates) or any(w <= 0 for w in weights):
        raise ContractError("need one positive weight per update")
    keys = list(updates[0])
    for u in updates[1:]:
        if list(u) != keys or any(u[k].shape != updates[0][k].shape for k in keys):
            raise ContractError("updates are not structurally identical")
    total = sum(weights)
    out = {}
    for key in keys:
        acc = np.zeros_like(updates[0][key])
        for u, w in zip(updates, weights):
            acc = acc + (w / total) * u[key]
        out[key] = acc
    return out


class Federation:
    """Server state plus the simulated clients."""

    def __init__(self, model_config: ModelConfig, config: RoundConfig, clients: list[ClientState],
                 global_shared: dict[str, np.ndarray] | None = None, bank: KnowledgeBank | None = None,
                 round_index: int = 0):
        self.model_config = model_config
        self.config = config
        self.clients = clients
        if global_shared is None:
            global_shared = OmniModel(model_config, config.seed, 0).shared_state()
        self.global_shared = global_shared
        self.bank = bank or KnowledgeBank(model_config.dim, config.rho, config.delta, config.window,
                                          config.max_size)
        self.round = round_index

    @classmethod
    def from_client_data(cls, model_config: ModelConfig, config: RoundConfig, client_data: list[ClientData],
                         shards: list[np.ndarray] | None = None,
                         modality_mixes: list[dict[int, int]] | None = None) -> Federation:
        clients = []
        for cid, data in enumerate(client_data):
            if len(data.y_train) == 0:
                raise ConfigError(f"client {cid} has an empty training shard", "data.num_samples")
            personal = OmniModel(model_config, config.seed, cid).personal_state()
            shard = shards[cid] if shards is not None else np.arange(len(data.y_train))
            mix = modality_mixes[cid] if modality_mixes is not None else {}
            clients.append(ClientState(cid, shard, mix, personal, data))
        return cls(model_config, config, clients)

    def config_hash(self) -> str:
        # the round budget is a horizon, not dynamics: a checkpoint may be extended
        fed = {k: v for k, v in self.config.to_dict().items() if k != "rounds"}
        blob = json.dumps({"model": self.model_config.to_dict(), "federation": fed}, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    # ---------------------------------------------------------------- rounds
    def run_round(self, workers: int = 1) -> RoundReport:
        r = self.round
        cfg = self.config
        participants = sample_clients(len(self.clients), cfg.participation, cfg.seed, r)
        snapshot = self.bank.snapshot()
        shared = {k: v.copy() for k, v in self.global_shared.items()}

        def work(cid):
            try:
                return local_update(self.clients[cid], shared, snapshot, cfg, self.model_config, r)
            except Exception as exc:  # noqa: BLE001 - re-raised with context
                raise ClientError(cid, r, exc) from exc

        if workers > 1 and len(participants) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(work, participants))
        else:
            results = [work(cid) for cid in participants]
        results.sort(key=lambda pair: pair[1].client_id)

        uploads = [u for _, u in results]
        self.global_shared = aggregate_backbones([u.shared for u in uploads], [u.n_k for u in uploads])
        for state, _ in results:
            self.clients[state.client_id] = state

        if len(self.bank):
            for u in uploads:
                self.bank.retrieve_topk(u.token, cfg.top_k)
        self.bank.insert_and_project([(u.client_id, u.token) for u in uploads])
        if (r + 1) % cfg.window == 0:
            self.bank.prune()
        self.bank.advance_round()

        records = []
        for u in uploads:
            evaluated = self.evaluate_client(u.client_id)
            for name, value in {**u.metrics, **evaluated}.items():
                records.append((u.client_id, name, value))
        self.round += 1
        return RoundReport(r, records, len(self.bank), participants)

    def run(self, rounds: int | None = None, workers: int = 1) -> list[RoundReport]:
        target = self.config.rounds if rounds is None else self.round + rounds
        reports = []
        while self.round < target:
            reports.append(self.run_round(workers))
        return reports

    # ------------------------------------------------------------ evaluation
    def client_model(self, client_id: int) -> OmniModel:
        model = OmniModel(self.model_config, self.config.seed, client_id)
        model.load(self.global_shared, self.clients[client_id].personal)
        return model

    def predict(self, client_id: int, x: np.ndarray, descriptors: np.ndarray) -> np.ndarray:
        model = self.client_model(client_id)
        retrieve = make_retriever(self.bank.snapshot(), self.config.top_k, self.model_config.retrieval)
        pred, _, _ = model(x, descriptors, retrieve)
        return pred.data

    def evaluate_client(self, client_id: int) -> dict[str, float]:
        data = self.clients[client_id].data
        pred = self.predict(client_id, data.x_test, data.d_test)
        return task_metrics(self.model_config.task, pred, data.y_test, self.model_config.num_classes)

    def evaluate(self) -> dict[int, dict[str, float]]:
        return {c.client_id: self.evaluate_client(c.client_id) for c in self.clients}

    # ----------------------------------------------------------- checkpoints
    def save(self, path, extra_meta: dict | None = None) -> None:
        from .io import write_container
        bank_meta, bank_arrays = self.bank.to_state()
        arrays = {f"global/{k}": v for k, v in self.global_shared.items()}
        arrays["bank/prototypes"] = bank_arrays["prototypes"]
        clients_meta = []
        for c in self.clients:
            arrays[f"client{c.client_id}/shard"] = np.asarray(c.shard, dtype=np.int64)
            for k, v in c.personal.items():
                arrays[f"client{c.client_id}/{k}"] = v
            clients_meta.append({"client_id": c.client_id,
                                 "modality_mix": {str(m): int(n) for m, n in c.modality_mix.items()}})
        meta = {"config_hash": self.config_hash(), "round": self.round,
                "model": self.model_config.to_dict(), "federation": self.config.to_dict(),
                "bank": bank_meta, "clients": clients_meta, "extra": extra_meta or {}}
        write_container(path, "federation", meta, arrays)

    def restore(self, path) -> None:
        """Load server and client state from a checkpoint written for the same config."""
        from .io import read_container
        meta, arrays = read_container(path, expected_kind="federation")
        if meta["config_hash"] != self.config_hash():
            raise ConfigError("checkpoint was written for a different configuration")
        self.round = meta["round"]
        self.global_shared = {k[len("global/"):]: v for k, v in arrays.items() if k.startswith("global/")}
        self.bank = KnowledgeBank.from_state(meta["bank"], {"prototypes": arrays["bank/prototypes"]})
        for c in self.clients:
            prefix = f"client{c.client_id}/"
            c.personal = {k[len(prefix):]: v for k, v in arrays.items()
                          if k.startswith(prefix) and k != prefix + "shard"}
            c.shard = arrays[prefix + "shard"]


def run_round(federation: Federation, workers: int = 1) -> tuple[Federation, RoundReport]:
    report = federation.run_round(workers)
    return federation, report
