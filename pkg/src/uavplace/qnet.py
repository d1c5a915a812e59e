"""Dueling convolutional Q-network with hand-derived gradients.

The architecture is fixed by an :class:`ArchSpec`: three strided valid
convolutions, each followed by batch normalization and ReLU, one fully
connected ReLU layer with optional dropout, and a dueling pair of linear
heads combined as

    Q(s, a) = V(s) + A(s, a) - mean_a A(s, a).

Everything runs in float64 numpy. Parameter values are kept exactly
representable in float32 (init, optimizer updates and checkpoint loading all
round through float32) so that checkpoint files, which store float32, round
trip bit-exactly.

Backpropagation is written out per layer rather than taped; the test suite
verifies every path against central finite differences.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .env import EpisodeConfig, Observation

__all__ = [
    "CheckpointError",
    "ArchSpec",
    "TINY_ARCH",
    "ConvStage",
    "QNetworkParams",
    "init_params",
    "encode_observation",
    "encode_batch",
    "forward",
    "loss_and_grads",
    "save_checkpoint",
    "load_checkpoint",
]

_BN_EPS = 1e-5
_TOPO_SCALE_M = 50.0  # topo channel is clipped to +-50 m and divided by 50

_MAGIC = b"UAVQ"
_VERSION = 1
_KIND_CONV = 1
_KIND_FC = 2
_KIND_VALUE = 3
_KIND_ADV = 4


class CheckpointError(ValueError):
    """Unreadable or inconsistent checkpoint file."""


@dataclass(frozen=True)
class ArchSpec:
    """Shape of the network; `conv` lists (filters, kernel, stride) stages."""

    input_cells: int = 61
    in_channels: int = 2
    conv: tuple[tuple[int, int, int], ...] = ((16, 7, 2), (32, 5, 2), (32, 3, 1))
    fc_units: int = 256
    n_actions: int = 4
    dropout_p: float = 0.4

    def __post_init__(self):
        if not (0.0 <= self.dropout_p < 1.0):
            raise ValueError(f"dropout_p must be in [0,1), got {self.dropout_p}")
        if self.fc_units < 1 or self.n_actions < 1 or self.in_channels < 1:
            raise ValueError("fc_units, n_actions and in_channels must be positive")
        self.stage_cells()  # raises if any stage shrinks below 1 cell

    def stage_cells(self) -> list[int]:
        """Spatial size after each conv stage; validates the chain."""
        size = self.input_cells
        sizes = []
        for filters, kernel, stride in self.conv:
            if filters < 1 or kernel < 1 or stride < 1:
                raise ValueError(f"bad conv stage ({filters},{kernel},{stride})")
            if kernel > size:
                raise ValueError(f"kernel {kernel} larger than input size {size}")
            size = (size - kernel) // stride + 1
            sizes.append(size)
        return sizes

    @property
    def flat_features(self) -> int:
        out = self.stage_cells()[-1] if self.conv else self.input_cells
        channels = self.conv[-1][0] if self.conv else self.in_channels
        return channels * out * out


# For finite-difference verification and fast unit tests.
TINY_ARCH = ArchSpec(input_cells=9, conv=((2, 3, 1), (2, 3, 1), (2, 3, 1)), fc_units=8)


def _f32exact(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float32).astype(np.float64)


@dataclass
class ConvStage:
    w: np.ndarray  # (filters, in_channels, k, k)
    b: np.ndarray  # (filters,)
    bn_scale: np.ndarray
    bn_shift: np.ndarray
    bn_mean: np.ndarray  # running mean
    bn_var: np.ndarray  # running variance (biased)


@dataclass
class QNetworkParams:
    arch: ArchSpec
    conv: list[ConvStage]
    fc_w: np.ndarray
    fc_b: np.ndarray
    value_w: np.ndarray
    value_b: np.ndarray
    adv_w: np.ndarray
    adv_b: np.ndarray

    def trainable_items(self):
        """(name, array) pairs that receive gradients, in a fixed order."""
        for i, stage in enumerate(self.conv):
            yield f"conv{i}.w", stage.w
            yield f"conv{i}.b", stage.b
            yield f"conv{i}.bn_scale", stage.bn_scale
            yield f"conv{i}.bn_shift", stage.bn_shift
        yield "fc.w", self.fc_w
        yield "fc.b", self.fc_b
        yield "value.w", self.value_w
        yield "value.b", self.value_b
        yield "adv.w", self.adv_w
        yield "adv.b", self.adv_b

    def state_items(self):
        """All persistent arrays, including batch-norm running statistics."""
        for i, stage in enumerate(self.conv):
            yield f"conv{i}.w", stage.w
            yield f"conv{i}.b", stage.b
            yield f"conv{i}.bn_scale", stage.bn_scale
            yield f"conv{i}.bn_shift", stage.bn_shift
            yield f"conv{i}.bn_mean", stage.bn_mean
            yield f"conv{i}.bn_var", stage.bn_var
        yield "fc.w", self.fc_w
        yield "fc.b", self.fc_b
        yield "value.w", self.value_w
        yield "value.b", self.value_b
        yield "adv.w", self.adv_w
        yield "adv.b", self.adv_b

    def get(self, name: str) -> np.ndarray:
        for key, arr in self.state_items():
            if key == name:
                return arr
        raise KeyError(name)

    def set_(self, name: str, value: np.ndarray) -> None:
        head, _, leaf = name.partition(".")
        if head.startswith("conv"):
            stage = self.conv[int(head[4:])]
            setattr(stage, leaf, value)
        elif head == "fc":
            setattr(self, f"fc_{leaf}", value)
        elif head == "value":
            setattr(self, f"value_{leaf}", value)
        elif head == "adv":
            setattr(self, f"adv_{leaf}", value)
        else:
            raise KeyError(name)

    def copy(self) -> "QNetworkParams":
        return QNetworkParams(
            arch=self.arch,
            conv=[
                ConvStage(
                    s.w.copy(), s.b.copy(), s.bn_scale.copy(), s.bn_shift.copy(),
                    s.bn_mean.copy(), s.bn_var.copy(),
                )
                for s in self.conv
            ],
            fc_w=self.fc_w.copy(),
            fc_b=self.fc_b.copy(),
            value_w=self.value_w.copy(),
            value_b=self.value_b.copy(),
            adv_w=self.adv_w.copy(),
            adv_b=self.adv_b.copy(),
        )


def init_params(seed: int, arch: ArchSpec = ArchSpec()) -> QNetworkParams:
    """Deterministic fan-in-scaled uniform weights, zero biases, identity BN."""
    rng = np.random.default_rng(seed)

    def uniform(shape, fan_in):
        lim = 1.0 / np.sqrt(fan_in)
        return _f32exact(rng.uniform(-lim, lim, size=shape))

    stages = []
    channels = arch.in_channels
    for filters, kernel, _ in arch.conv:
        stages.append(
            ConvStage(
                w=uniform((filters, channels, kernel, kernel), channels * kernel * kernel),
                b=np.zeros(filters),
                bn_scale=np.ones(filters),
                bn_shift=np.zeros(filters),
                bn_mean=np.zeros(filters),
                bn_var=np.ones(filters),
            )
        )
        channels = filters
    flat = arch.flat_features
    return QNetworkParams(
        arch=arch,
        conv=stages,
        fc_w=uniform((arch.fc_units, flat), flat),
        fc_b=np.zeros(arch.fc_units),
        value_w=uniform((1, arch.fc_units), arch.fc_units),
        value_b=np.zeros(1),
        adv_w=uniform((arch.n_actions, arch.fc_units), arch.fc_units),
        adv_b=np.zeros(arch.n_actions),
    )


# -- input encoding ---------------------------------------------------------


def encode_observation(
    obs: Observation, p_low_db: float = -150.0, p_high_db: float = 50.0
) -> np.ndarray:
    """Map an observation to the (2, n, n) network input.

    Channel 0 is the SINR window scaled so the low/high sentinels land on
    exactly 0 and 1; channel 1 is relative height clipped to +-50 m and
    scaled to [-1, 1].
    """
    sinr = (obs.sinr - p_low_db) / (p_high_db - p_low_db)
    topo = np.clip(obs.topo, -_TOPO_SCALE_M, _TOPO_SCALE_M) / _TOPO_SCALE_M
    return np.stack([sinr, topo])


def encode_batch(observations, config: EpisodeConfig) -> np.ndarray:
    return np.stack(
        [encode_observation(o, config.p_low_db, config.p_high_db) for o in observations]
    )


# -- forward / backward -----------------------------------------------------


def _im2col(x: np.ndarray, k: int, s: int) -> tuple[np.ndarray, int]:
    B, C, H, W = x.shape
    out = (H - k) // s + 1
    cols = np.empty((B, C, k * k, out * out), dtype=x.dtype)
    for di in range(k):
        for dj in range(k):
            patch = x[:, :, di : di + s * out : s, dj : dj + s * out : s]
            cols[:, :, di * k + dj, :] = patch.reshape(B, C, out * out)
    return cols.reshape(B, C * k * k, out * out), out


def _col2im(dcols: np.ndarray, x_shape, k: int, s: int) -> np.ndarray:
    B, C, H, W = x_shape
    out = (H - k) // s + 1
    dx = np.zeros(x_shape, dtype=dcols.dtype)
    d4 = dcols.reshape(B, C, k * k, out * out)
    for di in range(k):
        for dj in range(k):
            dx[:, :, di : di + s * out : s, dj : dj + s * out : s] += d4[
                :, :, di * k + dj, :
            ].reshape(B, C, out, out)
    return dx


def _forward_full(
    params: QNetworkParams,
    x: np.ndarray,
    bn_batch: bool,
    drop_rng: np.random.Generator | None,
):
    arch = params.arch
    B = x.shape[0]
    cache = {"x": x, "conv": []}
    a = x
    for stage, (filters, k, s) in zip(params.conv, arch.conv):
        cols, out = _im2col(a, k, s)
        wf = stage.w.reshape(filters, -1)
        y = np.matmul(wf, cols) + stage.b[:, None]
        y = y.reshape(B, filters, out, out)
        if bn_batch:
            mu = y.mean(axis=(0, 2, 3))
            var = y.var(axis=(0, 2, 3))
        else:
            mu = stage.bn_mean
            var = stage.bn_var
        ivar = 1.0 / np.sqrt(var + _BN_EPS)
        xhat = (y - mu[None, :, None, None]) * ivar[None, :, None, None]
        z = stage.bn_scale[None, :, None, None] * xhat + stage.bn_shift[None, :, None, None]
        relu_mask = z > 0
        a_next = np.where(relu_mask, z, 0.0)
        cache["conv"].append(
            {
                "in_shape": a.shape,
                "cols": cols,
                "k": k,
                "s": s,
                "mu": mu,
                "var": var,
                "ivar": ivar,
                "xhat": xhat,
                "relu_mask": relu_mask,
            }
        )
        a = a_next
    flat = a.reshape(B, -1)
    h_pre = flat @ params.fc_w.T + params.fc_b
    h_mask = h_pre > 0
    h = np.where(h_mask, h_pre, 0.0)
    if drop_rng is not None and arch.dropout_p > 0.0:
        keep = (drop_rng.random(h.shape) >= arch.dropout_p) / (1.0 - arch.dropout_p)
    else:
        keep = None
    hd = h * keep if keep is not None else h
    v = hd @ params.value_w.T + params.value_b
    adv = hd @ params.adv_w.T + params.adv_b
    q = v + adv - adv.mean(axis=1, keepdims=True)
    cache.update(flat=flat, h_mask=h_mask, keep=keep, hd=hd)
    return q, cache


def forward(
    params: QNetworkParams,
    batch: np.ndarray,
    mode: str = "infer",
    seed: int | None = None,
) -> np.ndarray:
    """Q-values (B, n_actions). Train mode normalizes with batch statistics
    and applies seeded dropout; infer mode is deterministic and pure."""
    x = _check_batch(params.arch, batch)
    if mode == "infer":
        q, _ = _forward_full(params, x, bn_batch=False, drop_rng=None)
    elif mode == "train":
        if params.arch.dropout_p > 0.0 and seed is None:
            raise ValueError("train-mode forward with dropout requires a seed")
        rng = np.random.default_rng(seed) if seed is not None else None
        q, _ = _forward_full(params, x, bn_batch=True, drop_rng=rng)
    else:
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    return q


def _check_batch(arch: ArchSpec, batch: np.ndarray) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    expected = (arch.in_channels, arch.input_cells, arch.input_cells)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise ValueError(f"batch shape {x.shape} does not match (B, {expected})")
    if x.shape[0] < 1:
        raise ValueError("batch must contain at least one observation")
    if not np.all(np.isfinite(x)):
        raise ValueError("batch entries must be finite")
    return x


def loss_and_grads(
    params: QNetworkParams,
    batch: np.ndarray,
    actions: np.ndarray,
    targets: np.ndarray,
    *,
    bn_mode: str = "batch",
    dropout_seed: int | None = None,
    return_bn_stats: bool = False,
):
    """Mean squared TD error on the selected actions, with its gradients.

    Gradients flow only through the selected-action outputs. `bn_mode`
    selects batch ("batch") or running ("running") normalization statistics;
    dropout is applied only when `dropout_seed` is given. With
    `return_bn_stats`, the per-stage batch means/variances are returned as a
    third element for running-statistics updates.
    """
    x = _check_batch(params.arch, batch)
    actions = np.asarray(actions, dtype=np.intp)
    targets = np.asarray(targets, dtype=np.float64)
    B = x.shape[0]
    if actions.shape != (B,) or targets.shape != (B,):
        raise ValueError("actions and targets must be 1-D of batch length")
    if not np.all(np.isfinite(targets)):
        raise ValueError("targets must be finite")
    if bn_mode not in ("batch", "running"):
        raise ValueError(f"bn_mode must be 'batch' or 'running', got {bn_mode!r}")

    drop_rng = np.random.default_rng(dropout_seed) if dropout_seed is not None else None
    q, cache = _forward_full(params, x, bn_batch=(bn_mode == "batch"), drop_rng=drop_rng)

    err = q[np.arange(B), actions] - targets
    loss = float(np.mean(err**2))
    dq = np.zeros_like(q)
    dq[np.arange(B), actions] = 2.0 * err / B

    grads: dict[str, np.ndarray] = {}

    # Dueling combine.
    dv = dq.sum(axis=1, keepdims=True)
    dadv = dq - dq.mean(axis=1, keepdims=True)
    hd = cache["hd"]
    grads["value.w"] = dv.T @ hd
    grads["value.b"] = dv.sum(axis=0)
    grads["adv.w"] = dadv.T @ hd
    grads["adv.b"] = dadv.sum(axis=0)
    dhd = dv @ params.value_w + dadv @ params.adv_w

    if cache["keep"] is not None:
        dh = dhd * cache["keep"]
    else:
        dh = dhd
    dh_pre = dh * cache["h_mask"]
    grads["fc.w"] = dh_pre.T @ cache["flat"]
    grads["fc.b"] = dh_pre.sum(axis=0)
    da = (dh_pre @ params.fc_w).reshape(
        cache["conv"][-1]["relu_mask"].shape if params.conv else cache["x"].shape
    )

    for i in range(len(params.conv) - 1, -1, -1):
        stage = params.conv[i]
        c = cache["conv"][i]
        dz = da * c["relu_mask"]
        axes = (0, 2, 3)
        grads[f"conv{i}.bn_scale"] = (dz * c["xhat"]).sum(axis=axes)
        grads[f"conv{i}.bn_shift"] = dz.sum(axis=axes)
        dxhat = dz * stage.bn_scale[None, :, None, None]
        ivar = c["ivar"][None, :, None, None]
        if bn_mode == "batch":
            n = dz.shape[0] * dz.shape[2] * dz.shape[3]
            sum_dxhat = dxhat.sum(axis=axes, keepdims=True)
            sum_dxhat_xhat = (dxhat * c["xhat"]).sum(axis=axes, keepdims=True)
            dy = (ivar / n) * (n * dxhat - sum_dxhat - c["xhat"] * sum_dxhat_xhat)
        else:
            dy = dxhat * ivar
        B_, F, out, _ = dy.shape
        dyf = dy.reshape(B_, F, out * out)
        grads[f"conv{i}.b"] = dyf.sum(axis=(0, 2))
        dw = np.einsum("bfp,bcp->fc", dyf, c["cols"])
        grads[f"conv{i}.w"] = dw.reshape(stage.w.shape)
        wf = stage.w.reshape(F, -1)
        dcols = np.matmul(wf.T, dyf)
        da = _col2im(dcols, c["in_shape"], c["k"], c["s"])

    if return_bn_stats:
        stats = [(c["mu"], c["var"]) for c in cache["conv"]]
        return loss, grads, stats
    return loss, grads


# -- checkpoints --------------------------------------------------------------


def _write_array(fh, arr: np.ndarray) -> None:
    fh.write(arr.astype("<f4").tobytes())


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint file")
    return data


def _read_array(fh, shape) -> np.ndarray:
    count = int(np.prod(shape))
    raw = _read_exact(fh, 4 * count)
    return np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)


def save_checkpoint(params: QNetworkParams, path) -> None:
    """Binary format: magic UAVQ, version u16, header, then one record per
    layer (kind tag, dims, float32 little-endian arrays)."""
    arch = params.arch
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<H", _VERSION))
        fh.write(struct.pack("<IIId", arch.input_cells, arch.in_channels, arch.n_actions, arch.dropout_p))
        fh.write(struct.pack("<I", len(params.conv) + 3))
        for stage, (filters, kernel, stride) in zip(params.conv, arch.conv):
            fh.write(struct.pack("<BI", _KIND_CONV, stride))
            fh.write(struct.pack("<B4I", 4, *stage.w.shape))
            for arr in (stage.w, stage.b, stage.bn_scale, stage.bn_shift, stage.bn_mean, stage.bn_var):
                _write_array(fh, arr)
        for kind, w, b in (
            (_KIND_FC, params.fc_w, params.fc_b),
            (_KIND_VALUE, params.value_w, params.value_b),
            (_KIND_ADV, params.adv_w, params.adv_b),
        ):
            fh.write(struct.pack("<B", kind))
            fh.write(struct.pack("<B2I", 2, *w.shape))
            _write_array(fh, w)
            _write_array(fh, b)


def load_checkpoint(path, arch: ArchSpec | None = None) -> QNetworkParams:
    """Load a checkpoint; if `arch` is given the stored architecture must
    match it exactly, otherwise a ValueError is raised."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != _MAGIC:
            raise CheckpointError("bad magic: not a Q-network checkpoint")
        (version,) = struct.unpack("<H", _read_exact(fh, 2))
        if version != _VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        input_cells, in_channels, n_actions, dropout_p = struct.unpack(
            "<IIId", _read_exact(fh, 20)
        )
        (layer_count,) = struct.unpack("<I", _read_exact(fh, 4))
        conv_specs: list[tuple[int, int, int]] = []
        stages: list[ConvStage] = []
        fc = value = adv = None
        for _ in range(layer_count):
            (kind,) = struct.unpack("<B", _read_exact(fh, 1))
            if kind == _KIND_CONV:
                (stride,) = struct.unpack("<I", _read_exact(fh, 4))
                (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
                if ndim != 4:
                    raise CheckpointError(f"conv record with {ndim} dims")
                shape = struct.unpack("<4I", _read_exact(fh, 16))
                filters, channels, k, k2 = shape
                if k != k2:
                    raise CheckpointError("non-square conv kernel")
                stages.append(
                    ConvStage(
                        w=_read_array(fh, shape),
                        b=_read_array(fh, (filters,)),
                        bn_scale=_read_array(fh, (filters,)),
                        bn_shift=_read_array(fh, (filters,)),
                        bn_mean=_read_array(fh, (filters,)),
                        bn_var=_read_array(fh, (filters,)),
                    )
                )
                conv_specs.append((filters, k, stride))
            elif kind in (_KIND_FC, _KIND_VALUE, _KIND_ADV):
                (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
                if ndim != 2:
                    raise CheckpointError(f"linear record with {ndim} dims")
                shape = struct.unpack("<2I", _read_exact(fh, 8))
                w = _read_array(fh, shape)
                b = _read_array(fh, (shape[0],))
                if kind == _KIND_FC:
                    fc = (w, b)
                elif kind == _KIND_VALUE:
                    value = (w, b)
                else:
                    adv = (w, b)
            else:
                raise CheckpointError(f"unknown layer kind {kind}")
        if fh.read(1):
            raise CheckpointError("trailing bytes after final layer record")
    if fc is None or value is None or adv is None:
        raise CheckpointError("checkpoint missing fully connected or head layers")
    stored = ArchSpec(
        input_cells=input_cells,
        in_channels=in_channels,
        conv=tuple(conv_specs),
        fc_units=fc[0].shape[0],
        n_actions=n_actions,
        dropout_p=float(dropout_p),
    )
    if arch is not None and stored != arch:
        raise ValueError(f"checkpoint architecture {stored} does not match expected {arch}")
    return QNetworkParams(
        arch=stored,
        conv=stages,
        fc_w=fc[0],
        fc_b=fc[1],
        value_w=value[0],
        value_b=value[1],
        adv_w=adv[0],
        adv_b=adv[1],
    )
