"""Client/server round state machines over an in-memory network.

Each global epoch a participation-sampled subset of clients trains
locally; on synchronization epochs those clients clip, noise, prove,
compress and encrypt their parameters, the server authenticates and
verifies every upload, aggregates the survivors, and every client
applies the (compressed, encrypted) global download. All randomness
derives from one master seed, so full runs are bit-reproducible,
and every transmitted byte is accounted per round.
"""

import logging
from dataclasses import dataclass, field, replace
from hashlib import sha256
from typing import Callable, Optional, Sequence

import numpy as np

from . import model as mas2s
from .aggregation import DtaaConfig, TrustReport, dtaa, fedavg, multikrum, plain_median, trimmed_mean
from .channel import (
    ChannelKey,
    CompressionConfig,
    DecodeError,
    EncryptedMessage,
    MacMismatch,
    compress,
    decrypt_and_verify,
    dequantize,
    encrypt_and_mac,
    message_size_bytes,
    pack_update,
    unpack_update,
)
from .data import MaskConfig, WindDataset, apply_mask, generate_mask, round_half_away, split_dataset
from .evaluation import AttackConfig, communication_overhead, imputation_metrics, sign_flip
from .nizk import GROUP_512, GROUP_2048, GroupParams, NizkSecret, encode_proof, nizk_prove, nizk_verify
from .params import ModelParams, digest, l2_norm
from .privacy import DpConfig, local_sensitivity, perturb, rand_scalar, select_clip_threshold

logger = logging.getLogger(__name__)

__all__ = [
    "FLConfig",
    "ClientData",
    "ClientState",
    "ClientUpload",
    "RoundRecord",
    "ExperimentResult",
    "select_clients",
    "build_seq_batch",
    "prepare_client_data",
    "client_round",
    "server_round",
    "client_apply",
    "run_experiment",
]

AGGREGATORS = ("dtaa", "fedavg", "tmean", "multikrum", "median")
_GROUPS = {512: GROUP_512, 2048: GROUP_2048}


@dataclass
class FLConfig:
    global_epochs: int = 100
    sync_interval: int = 10
    clients: int = 16
    participation: float = 0.5
    local_epochs: int = 20
    batch_size: int = 32
    aggregator: str = "dtaa"
    trim_rate: float = 0.1  # trimmed-mean baseline
    adversary_ratio: float = 0.3  # MultiKrum baseline
    dp: DpConfig = field(default_factory=DpConfig)
    compression: CompressionConfig = field(default_factory=CompressionConfig)
    dtaa: DtaaConfig = field(default_factory=DtaaConfig)
    dp_enabled: bool = True
    nizk_enabled: bool = True
    civ_enabled: bool = True
    compression_enabled: bool = True
    reset_optimizer: bool = False
    learning_rate: float = 0.001
    group_bits: int = 2048
    seed: int = 0

    def __post_init__(self):
        if self.global_epochs < 1 or self.sync_interval < 1:
            raise ValueError("epoch counts must be positive")
        if self.sync_interval > self.global_epochs:
            raise ValueError("sync_interval must not exceed global_epochs")
        if not (0 < self.participation <= 1):
            raise ValueError("participation must be in (0, 1]")
        if self.clients < 1 or self.local_epochs < 0:
            raise ValueError("bad client or epoch count")
        if self.aggregator not in AGGREGATORS:
            raise ValueError(f"aggregator must be one of {AGGREGATORS}")
        if self.group_bits not in _GROUPS:
            raise ValueError(f"group_bits must be one of {sorted(_GROUPS)}")
        # the noise calibration must see the actual schedule
        self.dp = replace(self.dp, global_epochs=self.global_epochs, sync_interval=self.sync_interval)

    @property
    def group(self) -> GroupParams:
        return _GROUPS[self.group_bits]


@dataclass
class ClientData:
    train: mas2s.SeqBatch
    val: mas2s.SeqBatch
    test: mas2s.SeqBatch
    farm_id: int = 0


@dataclass
class ClientState:
    client_id: int
    data: ClientData
    params: dict[str, np.ndarray]
    adam: mas2s.AdamState
    key: ChannelKey
    rng: np.random.Generator
    is_attacker: bool = False


@dataclass
class ClientUpload:
    """Transmitted message plus every intermediate stage, kept for audit."""

    client_id: int
    message: EncryptedMessage | bytes
    packed: bytes
    proof_bytes: int
    theta_clean: ModelParams
    theta_sent: ModelParams
    clip_threshold: float
    sigma: float


@dataclass
class RoundRecord:
    round_index: int
    selected: tuple[int, ...]
    upload_bytes: dict[int, int]
    proof_bytes: dict[int, int]
    download_bytes: int
    client_count: int
    hmac_ok: dict[int, bool]
    nizk_ok: dict[int, bool]
    excluded: dict[int, str]
    aggregated: tuple[int, ...]
    trust: Optional[TrustReport]
    global_digest: str
    aborted: bool = False

    def to_json_dict(self) -> dict:
        return {
            "round_index": self.round_index,
            "selected": list(self.selected),
            "upload_bytes": {str(k): v for k, v in sorted(self.upload_bytes.items())},
            "proof_bytes": {str(k): v for k, v in sorted(self.proof_bytes.items())},
            "download_bytes": self.download_bytes,
            "client_count": self.client_count,
            "hmac_ok": {str(k): v for k, v in sorted(self.hmac_ok.items())},
            "nizk_ok": {str(k): v for k, v in sorted(self.nizk_ok.items())},
            "excluded": {str(k): v for k, v in sorted(self.excluded.items())},
            "aggregated": list(self.aggregated),
            "trust_scores": self.trust.scores.tolist() if self.trust else None,
            "global_digest": self.global_digest,
            "aborted": self.aborted,
        }


@dataclass
class ExperimentResult:
    global_params: ModelParams
    records: list[RoundRecord]
    metrics: dict
    clients: list[ClientState]
    messages: list[EncryptedMessage | bytes] = field(default_factory=list)


def select_clients(n_clients: int, participation: float, rng: np.random.Generator) -> tuple[int, ...]:
    """max(1, round(E*N)) distinct ids, uniform without replacement."""
    count = max(1, round_half_away(participation * n_clients))
    count = min(count, n_clients)
    return tuple(sorted(int(i) for i in rng.choice(n_clients, size=count, replace=False)))


def build_seq_batch(ds: WindDataset, mask_cfg: MaskConfig, seed: int) -> mas2s.SeqBatch:
    """Mask each window's power series and append the mask input channel."""
    samples, t_len, n_feat = ds.features.shape
    inputs = np.zeros((samples, t_len, n_feat + 1))
    targets = np.zeros((samples, t_len))
    for i in range(samples):
        mask = generate_mask(t_len, mask_cfg, seed=seed + i).mask
        power = ds.features[i, :, 0]
        inputs[i, :, 0] = apply_mask(power, mask, mask_cfg.placeholder)
        inputs[i, :, 1:n_feat] = ds.features[i, :, 1:]
        inputs[i, :, n_feat] = mask
        targets[i] = power
    return mas2s.SeqBatch(inputs=inputs, targets=targets)


def prepare_client_data(
    datasets: Sequence[WindDataset],
    mask_cfg: MaskConfig,
    n_clients: int,
    seed: int = 0,
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
) -> list[ClientData]:
    """One farm per client, assigned round-robin when counts differ."""
    out = []
    for cid in range(n_clients):
        ds = datasets[cid % len(datasets)]
        train, val, test = split_dataset(ds, fractions, seed=seed + cid)
        base = (seed + 1) * 1_000_003 + cid * 10_007
        out.append(
            ClientData(
                train=build_seq_batch(train, mask_cfg, base),
                val=build_seq_batch(val, mask_cfg, base + 100_000),
                test=build_seq_batch(test, mask_cfg, base + 200_000),
                farm_id=ds.farm_id,
            )
        )
    return out


def client_round(
    state: ClientState,
    cfg: FLConfig,
    model_cfg: mas2s.Mas2sConfig,
    clip_threshold: Optional[float] = None,
    sensitivity: Optional[float] = None,
    tamper: Optional[Callable[[ModelParams, np.random.Generator], ModelParams]] = None,
) -> ClientUpload:
    """Package the client's current parameters for upload.

    Pipeline (each stage toggleable): perturb with the shared clip
    threshold and sensitivity, prove knowledge of the noise seed,
    compress, pack, encrypt-then-MAC.
    """
    theta = mas2s.to_model_params(state.params, model_cfg)
    if tamper is not None:
        theta = tamper(theta, state.rng)

    grp = cfg.group
    tau_used, sigma_used = 0.0, 0.0
    theta_sent = theta
    if cfg.dp_enabled:
        noise_seed = rand_scalar(state.rng, grp.q)
        theta_sent, tau_used, sigma_used = perturb(
            theta, cfg.dp, len(state.data.train), noise_seed,
            clip_threshold=clip_threshold, sensitivity=sensitivity,
        )
    else:
        noise_seed = rand_scalar(state.rng, grp.q)

    proof = None
    if cfg.nizk_enabled:
        secret = NizkSecret(seed=noise_seed, nonce=rand_scalar(state.rng, grp.q))
        proof = nizk_prove(secret, grp, theta_sent, theta)

    payload = compress(theta_sent, cfg.compression) if cfg.compression_enabled else theta_sent
    packed = pack_update(payload, proof, direction="upload")
    message: EncryptedMessage | bytes = packed
    if cfg.civ_enabled:
        message = encrypt_and_mac(packed, state.key, iv=state.rng.bytes(16), direction="upload")
    return ClientUpload(
        client_id=state.client_id,
        message=message,
        packed=packed,
        proof_bytes=len(encode_proof(proof)) if proof else 0,
        theta_clean=theta,
        theta_sent=theta_sent,
        clip_threshold=tau_used,
        sigma=sigma_used,
    )


def _aggregate(updates: list[ModelParams], cfg: FLConfig) -> tuple[ModelParams, Optional[TrustReport]]:
    if cfg.aggregator == "dtaa":
        if len(updates) < 2:
            return updates[0], None
        dtaa_cfg = cfg.dtaa
        if dtaa_cfg.neighbors >= len(updates):
            # survivor count can drop below the configured graph degree
            dtaa_cfg = replace(dtaa_cfg, neighbors=len(updates) - 1)
        return dtaa(updates, dtaa_cfg)
    if cfg.aggregator == "fedavg":
        return fedavg(updates), None
    if cfg.aggregator == "tmean":
        return trimmed_mean(updates, cfg.trim_rate), None
    if cfg.aggregator == "median":
        return plain_median(updates), None
    # multikrum: clamp f to what the survivor count supports
    f = int(np.floor(cfg.adversary_ratio * len(updates)))
    f_max = max(0, (len(updates) - 3) // 2)
    if f > f_max:
        logger.warning("MultiKrum: clamping f from %d to %d for %d updates", f, f_max, len(updates))
        f = f_max
    if len(updates) < 3:
        return fedavg(updates), None
    return multikrum(updates, f), None


def server_round(
    uploads: Sequence[ClientUpload],
    cfg: FLConfig,
    keys: dict[int, ChannelKey],
    previous_global: ModelParams,
    round_index: int,
    server_rng: np.random.Generator,
) -> tuple[dict[int, EncryptedMessage | bytes], RoundRecord, ModelParams]:
    """Authenticate, verify, decompress, aggregate, and build the downloads.

    Clients failing any check are excluded from aggregation and recorded;
    with zero survivors the round aborts and the previous global state is
    redistributed.
    """
    hmac_ok: dict[int, bool] = {}
    nizk_ok: dict[int, bool] = {}
    excluded: dict[int, str] = {}
    survivors: list[tuple[int, ModelParams]] = []

    for up in sorted(uploads, key=lambda u: u.client_id):
        cid = up.client_id
        if cfg.civ_enabled:
            try:
                packed = decrypt_and_verify(up.message, keys[cid])
                hmac_ok[cid] = True
            except MacMismatch:
                hmac_ok[cid] = False
                excluded[cid] = "hmac verification failed"
                continue
        else:
            packed = up.message if isinstance(up.message, bytes) else up.packed
            hmac_ok[cid] = True
        try:
            payload, proof, direction = unpack_update(packed)
        except DecodeError as exc:
            excluded[cid] = f"malformed frame: {exc}"
            continue
        if direction != "upload":
            excluded[cid] = "wrong message direction"
            continue
        if cfg.nizk_enabled:
            ok = proof is not None and nizk_verify(proof, cfg.group)
            nizk_ok[cid] = ok
            if not ok:
                excluded[cid] = "nizk proof invalid or missing"
                continue
        dense = dequantize(payload) if not isinstance(payload, ModelParams) else payload
        survivors.append((cid, dense))

    aborted = not survivors
    trust: Optional[TrustReport] = None
    aggregated: tuple[int, ...] = ()
    if aborted:
        new_global = previous_global
    else:
        ids = [cid for cid, _ in survivors]
        updates = [p for _, p in survivors]
        new_global, trust = _aggregate(updates, cfg)
        if trust is not None:
            aggregated = tuple(ids[i] for i in trust.selected)
            for local_idx, reason in trust.excluded.items():
                excluded[ids[local_idx]] = reason
        else:
            aggregated = tuple(ids)

    payload = compress(new_global, cfg.compression) if cfg.compression_enabled else new_global
    packed = pack_update(payload, None, direction="download")
    downloads: dict[int, EncryptedMessage | bytes] = {}
    for cid in sorted(keys):
        if cfg.civ_enabled:
            downloads[cid] = encrypt_and_mac(packed, keys[cid], iv=server_rng.bytes(16), direction="download")
        else:
            downloads[cid] = packed

    record = RoundRecord(
        round_index=round_index,
        selected=tuple(sorted(up.client_id for up in uploads)),
        upload_bytes={up.client_id: message_size_bytes(up.message) for up in uploads},
        proof_bytes={up.client_id: up.proof_bytes for up in uploads},
        download_bytes=message_size_bytes(next(iter(downloads.values()))) if downloads else 0,
        client_count=len(keys),
        hmac_ok=hmac_ok,
        nizk_ok=nizk_ok,
        excluded=excluded,
        aggregated=aggregated,
        trust=trust,
        global_digest=digest(new_global).hex,
        aborted=aborted,
    )
    return downloads, record, new_global


def client_apply(
    state: ClientState,
    download: EncryptedMessage | bytes,
    cfg: FLConfig,
    model_cfg: mas2s.Mas2sConfig,
) -> bool:
    """Install the global parameters; on any integrity failure keep the old ones."""
    if cfg.civ_enabled:
        try:
            packed = decrypt_and_verify(download, state.key)
        except MacMismatch:
            logger.warning("client %d: download failed HMAC, keeping stale params", state.client_id)
            return False
    else:
        packed = download
    try:
        payload, _, direction = unpack_update(packed)
    except DecodeError:
        logger.warning("client %d: malformed download, keeping stale params", state.client_id)
        return False
    if direction != "download":
        return False
    dense = dequantize(payload) if not isinstance(payload, ModelParams) else payload
    state.params = mas2s.from_model_params(dense)
    if cfg.reset_optimizer:
        state.adam = mas2s.AdamState(learning_rate=cfg.learning_rate)
    return True


def _client_key(master_seed: int, client_id: int) -> ChannelKey:
    return ChannelKey(sha256(f"ztfed/key/{master_seed}/{client_id}".encode()).digest())


def _rng(master_seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=master_seed, spawn_key=tags))


def run_experiment(
    cfg: FLConfig,
    model_cfg: mas2s.Mas2sConfig,
    client_data: Sequence[ClientData],
    attack: Optional[AttackConfig] = None,
    keep_artifacts: bool = False,
) -> ExperimentResult:
    """Execute the full protocol loop and score the final global model.

    Sign-flipping attackers (when configured) tamper with their trained
    parameters just before the upload pipeline. Returns the final global
    parameters, the per-round ledger, and summary metrics.
    """
    if len(client_data) != cfg.clients:
        raise ValueError(f"need data for {cfg.clients} clients, got {len(client_data)}")

    init_params = mas2s.init_params(model_cfg, _rng(cfg.seed, 0))
    attacker_ids: set[int] = set()
    if attack is not None and attack.anomaly_rate > 0:
        n_attack = round_half_away(attack.anomaly_rate * cfg.clients)
        if n_attack:
            ids = _rng(cfg.seed, 1).choice(cfg.clients, size=n_attack, replace=False)
            attacker_ids = {int(i) for i in ids}

    clients = [
        ClientState(
            client_id=cid,
            data=client_data[cid],
            params={k: v.copy() for k, v in init_params.items()},
            adam=mas2s.AdamState(learning_rate=cfg.learning_rate),
            key=_client_key(cfg.seed, cid),
            rng=_rng(cfg.seed, 2, cid),
            is_attacker=cid in attacker_ids,
        )
        for cid in range(cfg.clients)
    ]
    keys = {c.client_id: c.key for c in clients}
    selection_rng = _rng(cfg.seed, 3)
    server_rng = _rng(cfg.seed, 4)
    global_params = mas2s.to_model_params(init_params, model_cfg)

    def tamper(theta: ModelParams, rng: np.random.Generator) -> ModelParams:
        return sign_flip(theta, attack.flip_fraction, rng)

    records: list[RoundRecord] = []
    messages: list[EncryptedMessage | bytes] = []
    for epoch in range(1, cfg.global_epochs + 1):
        selected = select_clients(cfg.clients, cfg.participation, selection_rng)
        for cid in selected:
            st = clients[cid]
            st.params, st.adam, _ = mas2s.train_local(
                st.data.train, st.params, cfg.local_epochs, st.adam, model_cfg,
                st.rng, batch_size=cfg.batch_size,
            )
        if epoch % cfg.sync_interval != 0:
            continue

        clip_threshold = None
        sensitivity = None
        if cfg.dp_enabled:
            norms = [l2_norm(mas2s.to_model_params(clients[cid].params, model_cfg)) for cid in selected]
            clip_threshold = select_clip_threshold(norms, cfg.dp.clip_percentile)
            if clip_threshold <= 0:
                clip_threshold = 1e-12
            sensitivity = max(local_sensitivity(clip_threshold, len(clients[cid].data.train)) for cid in selected)

        uploads = [
            client_round(
                clients[cid], cfg, model_cfg,
                clip_threshold=clip_threshold, sensitivity=sensitivity,
                tamper=tamper if clients[cid].is_attacker else None,
            )
            for cid in selected
        ]
        downloads, record, global_params = server_round(
            uploads, cfg, keys, global_params, epoch, server_rng
        )
        for cid in sorted(downloads):
            client_apply(clients[cid], downloads[cid], cfg, model_cfg)
        records.append(record)
        if keep_artifacts:
            messages.extend(up.message for up in uploads)
            messages.extend(downloads[cid] for cid in sorted(downloads))

    metrics = _score(global_params, model_cfg, client_data, records)
    return ExperimentResult(
        global_params=global_params,
        records=records,
        metrics=metrics,
        clients=clients,
        messages=messages,
    )


def _score(
    global_params: ModelParams,
    model_cfg: mas2s.Mas2sConfig,
    client_data: Sequence[ClientData],
    records: list[RoundRecord],
) -> dict:
    params = mas2s.from_model_params(global_params)
    per_client = []
    for cid, data in enumerate(client_data):
        imputed = mas2s.impute(data.test.inputs, params, model_cfg)
        mask = data.test.inputs[:, :, -1]
        mae, rmse, maape = imputation_metrics(imputed, data.test.targets, mask)
        per_client.append({"client": cid, "mae": mae, "rmse": rmse, "maape": maape})
    return {
        "mae": float(np.mean([m["mae"] for m in per_client])),
        "rmse": float(np.mean([m["rmse"] for m in per_client])),
        "maape": float(np.mean([m["maape"] for m in per_client])),
        "per_client": per_client,
        "rounds": len(records),
        "communication_mb": communication_overhead(records),
        "final_digest": digest(global_params).hex,
    }
