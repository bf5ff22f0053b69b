"""The three stage estimators: dense funnel, stacked LSTM, and the branched
attention network, all over the same 39-week x 12-feature input plus a 9-slot
location one-hot, emitting a 6-stage distribution.

Builders log their trainable-parameter count together with the delta from the
reference counts; the delta is reported, not asserted.
"""

from __future__ import annotations

import json
import logging
import struct

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .layers import (DenseLayer, DropoutSpec, LstmLayer, SelfAttention,
                     StageHead, dropout_apply)

logger = logging.getLogger(__name__)

N_WEEKS = 39
N_FEATURES = 12
N_LOCATIONS = 9
N_STAGES = 6
DENSE_WIDTHS = (1024, 512, 256, 128)

# channel layout of the feature block, used to split the branched network's
# inputs: fpar m/s, agdd m/s, srad m/s, rain med/s, cond m/s, bd m/s
CANOPY_CHANNELS = (0, 1, 2, 3)
SOLAR_CHANNELS = (4, 5)
SOIL_CHANNELS = (6, 7, 8, 9, 10, 11)

# reference trainable-parameter counts for the three architectures
REFERENCE_PARAM_COUNTS = {
    "dense": 1_170_054,
    "sequential": 1_046_278,
    "dgnn": 1_018_094,
}

CHECKPOINT_MAGIC = b"CSTG"
CHECKPOINT_VERSION = 1


class ParamStore:
    """Ordered, uniquely named parameter tensors with gradient slots."""

    def __init__(self):
        self._params: dict[str, Node] = {}

    def register(self, params: dict[str, Node]) -> None:
        for name, node in params.items():
            if name in self._params:
                raise ValueError(f"duplicate parameter name {name!r}")
            self._params[name] = node

    def __getitem__(self, name: str) -> Node:
        return self._params[name]

    def __iter__(self):
        return iter(self._params.items())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def n_parameters(self) -> int:
        return sum(node.value.size for node in self._params.values())

    def zero_grad(self) -> None:
        for node in self._params.values():
            node.zero_grad()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: node.value.copy() for name, node in self._params.items()}

    def load(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(arrays)
        if missing:
            raise ValueError(f"missing parameters: {sorted(missing)}")
        for name, node in self._params.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != node.value.shape:
                raise ValueError(
                    f"shape mismatch for {name!r}: {arr.shape} != {node.value.shape}"
                )
            node.value[...] = arr


def _check_inputs(features, locations) -> tuple[np.ndarray, np.ndarray]:
    features = np.asarray(features, dtype=np.float64)
    locations = np.asarray(locations, dtype=np.float64)
    if features.ndim == 2:
        features = features[None]
        locations = np.atleast_2d(locations)
    if features.shape[1:] != (N_WEEKS, N_FEATURES):
        raise ad.ShapeError(f"features must be [batch, {N_WEEKS}, {N_FEATURES}]")
    if locations.shape != (features.shape[0], N_LOCATIONS):
        raise ad.ShapeError(f"locations must be [batch, {N_LOCATIONS}]")
    return features, locations


class StageModel:
    """Shared estimator surface: features + location in, stage logits out."""

    arch: str

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.params = ParamStore()
        self.dropout_rate = 0.2

    def _forward(self, features, locations, train, rng, taps) -> Node:
        raise NotImplementedError

    def logits(self, features, locations, train: bool = False,
               rng: np.random.Generator | None = None,
               taps: dict | None = None) -> Node:
        features, locations = _check_inputs(features, locations)
        return self._forward(features, locations, train, rng, taps)

    def estimate(self, features, locations) -> np.ndarray:
        """Stage distributions for a batch, shape [batch, 6]."""
        return ad.softmax(self.logits(features, locations), axis=-1).value

    def n_parameters(self) -> int:
        return self.params.n_parameters()

    def _dropout(self, x: Node, train: bool, rng) -> Node:
        return dropout_apply(DropoutSpec(self.dropout_rate, train), x, rng)

    def _log_build(self) -> None:
        count = self.n_parameters()
        ref = REFERENCE_PARAM_COUNTS[self.arch]
        logger.info(
            "built %s estimator: %d trainable parameters (reference %d, delta %+d)",
            self.arch, count, ref, count - ref,
        )


class DenseStageModel(StageModel):
    """Funnel of dense layers over the flattened feature block plus location."""

    arch = "dense"

    def __init__(self, seed: int = 0):
        super().__init__(seed)
        rng = np.random.default_rng(seed)
        n_in = N_WEEKS * N_FEATURES + N_LOCATIONS
        self.funnel: list[DenseLayer] = []
        for width in DENSE_WIDTHS:
            layer = DenseLayer.create(n_in, width, "tanh", rng)
            self.params.register(layer.params(f"funnel{width}"))
            self.funnel.append(layer)
            n_in = width
        self.head = StageHead(rng)
        self.params.register(self.head.params("head"))
        self._log_build()

    def _forward(self, features, locations, train, rng, taps) -> Node:
        flat = np.concatenate(
            [features.reshape(features.shape[0], -1), locations], axis=-1
        )
        x = ad.constant(flat)
        for layer in self.funnel:
            if taps is not None and layer is self.funnel[-1]:
                taps["pre_dense128"] = x.value.copy()
            x = layer.forward(x)
            x = self._dropout(x, train, rng)
        if taps is not None:
            taps["pre_softmax"] = x.value.copy()
        logits, _ = self.head.forward(x)
        return logits


class SequentialStageModel(StageModel):
    """Three chained LSTMs; all three hidden sequences are flattened together
    with the location vector into the 128-node dense layer."""

    arch = "sequential"

    def __init__(self, seed: int = 0):
        super().__init__(seed)
        rng = np.random.default_rng(seed)
        self.lstms = [
            LstmLayer.create(N_FEATURES, rng=rng),
            LstmLayer.create(64, rng=rng),
            LstmLayer.create(64, rng=rng),
        ]
        for idx, lstm in enumerate(self.lstms):
            self.params.register(lstm.params(f"lstm{idx}"))
        n_concat = N_WEEKS * 3 * 64 + N_LOCATIONS
        self.dense = DenseLayer.create(n_concat, 128, "tanh", rng)
        self.params.register(self.dense.params("dense128"))
        self.head = StageHead(rng)
        self.params.register(self.head.params("head"))
        self._log_build()

    def _forward(self, features, locations, train, rng, taps) -> Node:
        batch = features.shape[0]
        seq = ad.constant(features)
        hidden_seqs = []
        for lstm in self.lstms:
            seq = lstm.forward(seq, return_sequence=True)
            hidden_seqs.append(seq)
        merged = ad.concat(hidden_seqs, axis=-1)             # [B, 39, 192]
        flat = ad.reshape(merged, (batch, N_WEEKS * 3 * 64))
        x = ad.concat([flat, ad.constant(locations)], axis=-1)
        if taps is not None:
            taps["pre_dense128"] = x.value.copy()
        x = self._dropout(self.dense.forward(x), train, rng)
        if taps is not None:
            taps["pre_softmax"] = x.value.copy()
        logits, _ = self.head.forward(x)
        return logits


class BranchedStageModel(StageModel):
    """Branched estimator (tag "dgnn"): canopy/thermal, solar, and soil
    moisture channels feed separate LSTMs, with two-head self-attention ahead
    of the solar and soil branches; branch hidden sequences are flattened with
    the location vector into the 128-node dense layer."""

    arch = "dgnn"

    def __init__(self, seed: int = 0):
        super().__init__(seed)
        rng = np.random.default_rng(seed)
        self.attn_solar = SelfAttention(len(SOLAR_CHANNELS), rng=rng)
        self.params.register(self.attn_solar.params("attn_solar"))
        self.attn_soil = SelfAttention(len(SOIL_CHANNELS), rng=rng)
        self.params.register(self.attn_soil.params("attn_soil"))
        self.lstm_canopy = LstmLayer.create(len(CANOPY_CHANNELS), rng=rng)
        self.params.register(self.lstm_canopy.params("lstm_canopy"))
        self.lstm_solar = LstmLayer.create(len(SOLAR_CHANNELS), rng=rng)
        self.params.register(self.lstm_solar.params("lstm_solar"))
        self.lstm_soil = LstmLayer.create(len(SOIL_CHANNELS), rng=rng)
        self.params.register(self.lstm_soil.params("lstm_soil"))
        n_concat = N_WEEKS * 3 * 64 + N_LOCATIONS
        self.dense = DenseLayer.create(n_concat, 128, "tanh", rng)
        self.params.register(self.dense.params("dense128"))
        self.head = StageHead(rng)
        self.params.register(self.head.params("head"))
        self._log_build()

    def _forward(self, features, locations, train, rng, taps) -> Node:
        batch = features.shape[0]
        canopy_in = ad.constant(features[:, :, CANOPY_CHANNELS])
        solar_in = ad.constant(features[:, :, SOLAR_CHANNELS])
        soil_in = ad.constant(features[:, :, SOIL_CHANNELS])

        canopy = self.lstm_canopy.forward(canopy_in, return_sequence=True)
        solar = self.lstm_solar.forward(self.attn_solar.forward(solar_in),
                                        return_sequence=True)
        soil = self.lstm_soil.forward(self.attn_soil.forward(soil_in),
                                      return_sequence=True)
        if taps is not None:
            taps["branch_canopy"] = canopy.value.copy()
            taps["branch_solar"] = solar.value.copy()
            taps["branch_soil"] = soil.value.copy()

        merged = ad.concat([canopy, solar, soil], axis=-1)   # [B, 39, 192]
        flat = ad.reshape(merged, (batch, N_WEEKS * 3 * 64))
        x = ad.concat([flat, ad.constant(locations)], axis=-1)
        if taps is not None:
            taps["pre_dense128"] = x.value.copy()
        x = self._dropout(self.dense.forward(x), train, rng)
        if taps is not None:
            taps["pre_softmax"] = x.value.copy()
        logits, _ = self.head.forward(x)
        return logits


def build_dense(seed: int = 0) -> DenseStageModel:
    return DenseStageModel(seed)


def build_sequential(seed: int = 0) -> SequentialStageModel:
    return SequentialStageModel(seed)


def build_dgnn(seed: int = 0) -> BranchedStageModel:
    return BranchedStageModel(seed)


BUILDERS = {
    "dense": build_dense,
    "sequential": build_sequential,
    "dgnn": build_dgnn,
}


def build_model(arch: str, seed: int = 0) -> StageModel:
    try:
        builder = BUILDERS[arch]
    except KeyError:
        raise ValueError(f"unknown architecture tag {arch!r}") from None
    return builder(seed)


def parameter_count_report(arch: str, seed: int = 0) -> dict:
    """Count report for one architecture: built count, reference, delta."""
    model = build_model(arch, seed)
    count = model.n_parameters()
    ref = REFERENCE_PARAM_COUNTS[arch]
    return {"arch": arch, "parameters": count, "reference": ref,
            "delta": count - ref}


def save_checkpoint(model: StageModel, path) -> None:
    """Versioned container: magic, version, JSON header (arch tag, build
    seed, parameter names and shapes), then little-endian float64 payloads in
    header order."""
    entries = [{"name": name, "shape": list(node.value.shape)}
               for name, node in model.params]
    header = json.dumps({
        "version": CHECKPOINT_VERSION,
        "arch": model.arch,
        "seed": model.seed,
        "params": entries,
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for _, node in model.params:
            fh.write(np.ascontiguousarray(node.value, dtype="<f8").tobytes())


def load_checkpoint(path) -> StageModel:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        arrays: dict[str, np.ndarray] = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * n)
            if len(buf) != 8 * n:
                raise ValueError("truncated checkpoint payload")
            arrays[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape)
    model = build_model(header["arch"], seed=header["seed"])
    model.params.load(arrays)
    return model
