"""Architecture descriptors, flat parameter layout and the weight file format."""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from sparsecast.errors import ResumeError, ShapeError

WEIGHTS_MAGIC = "SPARSECAST-WEIGHTS"
WEIGHTS_VERSION = 1


@dataclass(frozen=True)
class LstmArch:
    n_features: int
    hidden: int = 2

    kind = "lstm"

    def __post_init__(self):
        if self.n_features < 1 or self.hidden < 1:
            raise ShapeError(f"invalid LSTM dims F={self.n_features} h={self.hidden}")

    def layout(self):
        F, h = self.n_features, self.hidden
        return [
            ("kernel", (F, 4 * h)),
            ("recurrent", (h, 4 * h)),
            ("bias", (4 * h,)),
            ("dense_w", (h, 1)),
            ("dense_b", (1,)),
        ]

    def header_fields(self):
        return {"n_features": self.n_features, "hidden": self.hidden}


@dataclass(frozen=True)
class CnnArch:
    """Strided temporal conv, five pointwise convs, dense head plus a dense skip
    path straight from the flattened input."""

    n_features: int
    window_len: int = 1800
    kernel: int = 60
    stride: int = 30
    filters: int = 10
    n_pointwise: int = 5

    kind = "cnn"

    def __post_init__(self):
        if self.n_features < 1 or self.window_len < self.kernel or self.kernel < 1 or self.stride < 1:
            raise ShapeError(
                f"invalid CNN dims F={self.n_features} L={self.window_len} "
                f"kernel={self.kernel} stride={self.stride}"
            )

    @property
    def conv_rows(self):
        return (self.window_len - self.kernel) // self.stride + 1

    def layout(self):
        C = self.filters
        out = [("conv1_w", (self.kernel, C)), ("conv1_b", (C,))]
        for j in range(self.n_pointwise):
            out += [(f"pw{j}_w", (C, C)), (f"pw{j}_b", (C,))]
        out += [
            ("dense_w", (self.conv_rows * self.n_features * C, 1)),
            ("dense_b", (1,)),
            ("skip_w", (self.window_len * self.n_features, 1)),
            ("skip_b", (1,)),
        ]
        return out

    def header_fields(self):
        return {
            "n_features": self.n_features,
            "window_len": self.window_len,
            "kernel": self.kernel,
            "stride": self.stride,
            "filters": self.filters,
            "n_pointwise": self.n_pointwise,
        }


def param_count(arch) -> int:
    return int(sum(np.prod(shape) for _, shape in arch.layout()))


def unflatten(arch, flat):
    """Named array views into a flat parameter (or gradient) vector."""
    views = {}
    offset = 0
    for name, shape in arch.layout():
        size = int(np.prod(shape))
        views[name] = flat[offset : offset + size].reshape(shape)
        offset += size
    return views


@dataclass
class ModelState:
    arch: LstmArch | CnnArch
    params: np.ndarray
    m: np.ndarray = None
    v: np.ndarray = None
    seed: int = 0
    step: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = param_count(self.arch)
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (n,):
            raise ShapeError(f"parameter vector has {self.params.size} entries, arch needs {n}")
        if self.m is None:
            self.m = np.zeros(n)
        if self.v is None:
            self.v = np.zeros(n)
        if not (np.all(np.isfinite(self.params)) and np.all(np.isfinite(self.m)) and np.all(np.isfinite(self.v))):
            raise ValueError("model state contains non-finite values")

    def copy(self, **changes):
        fresh = replace(
            self,
            params=self.params.copy(),
            m=self.m.copy(),
            v=self.v.copy(),
            meta=dict(self.meta),
        )
        return replace(fresh, **changes) if changes else fresh

    def reset_optimizer(self):
        """Fresh optimizer (zero moments, step 0) around copied weights."""
        return self.copy(m=np.zeros_like(self.m), v=np.zeros_like(self.v), step=0)

    def equals(self, other) -> bool:
        """Bit-level equality of architecture, parameters and optimizer state."""
        return (
            self.arch == other.arch
            and self.step == other.step
            and self.seed == other.seed
            and self.params.tobytes() == other.params.tobytes()
            and self.m.tobytes() == other.m.tobytes()
            and self.v.tobytes() == other.v.tobytes()
        )


def init_state(arch, seed: int) -> ModelState:
    """Fresh parameters drawn only from ``seed``.

    LSTM: input kernel U(+-1/sqrt(F)), recurrent U(+-1/sqrt(h)), zero biases
    except forget gate = 1. Conv/dense layers use Glorot-uniform, zero bias.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EED]))
    flat = np.zeros(param_count(arch))
    p = unflatten(arch, flat)
    if arch.kind == "lstm":
        F, h = arch.n_features, arch.hidden
        p["kernel"][...] = rng.uniform(-1, 1, (F, 4 * h)) / np.sqrt(F)
        p["recurrent"][...] = rng.uniform(-1, 1, (h, 4 * h)) / np.sqrt(h)
        p["bias"][h : 2 * h] = 1.0
        p["dense_w"][...] = _glorot(rng, (h, 1))
    else:
        for name, shape in arch.layout():
            if name.endswith("_w"):
                if name == "conv1_w":
                    fan_in, fan_out = arch.kernel, arch.kernel * arch.filters
                else:
                    fan_in, fan_out = shape
                p[name][...] = _glorot(rng, shape, fan_in, fan_out)
    return ModelState(arch=arch, params=flat, seed=int(seed))


def _glorot(rng, shape, fan_in=None, fan_out=None):
    fan_in = shape[0] if fan_in is None else fan_in
    fan_out = shape[-1] if fan_out is None else fan_out
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape)


# --- weight file -----------------------------------------------------------


def save_state(state: ModelState, path, **extra) -> Path:
    """Write the weight file atomically (temp file + rename).

    Layout: ``key=value`` text header lines closed by a blank line, then the
    little-endian float64 payload ``params | m | v``.
    """
    path = Path(path)
    payload = b"".join(a.astype("<f8").tobytes() for a in (state.params, state.m, state.v))
    fields = {"version": WEIGHTS_VERSION, "kind": state.arch.kind}
    fields.update(state.arch.header_fields())
    fields.update(
        step=state.step,
        seed=state.seed,
        n_params=state.params.size,
        sha256=hashlib.sha256(payload).hexdigest(),
    )
    for key, value in {**state.meta, **extra}.items():
        fields[f"meta.{key}"] = value
    header = WEIGHTS_MAGIC + "\n" + "".join(f"{k}={v}\n" for k, v in fields.items()) + "\n"
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header.encode("utf-8"))
        fh.write(payload)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    return path


def load_state(path) -> ModelState:
    path = Path(path)
    phase = None
    try:
        raw = path.read_bytes()
        head, sep, payload = raw.partition(b"\n\n")
        lines = head.decode("utf-8").split("\n")
        if not sep or lines[0] != WEIGHTS_MAGIC:
            raise ValueError("bad magic or unterminated header")
        fields = dict(line.split("=", 1) for line in lines[1:])
        phase = fields.get("meta.phase")
        if int(fields["version"]) != WEIGHTS_VERSION:
            raise ValueError(f"unsupported version {fields['version']}")
        if hashlib.sha256(payload).hexdigest() != fields["sha256"]:
            raise ValueError("payload checksum mismatch")
        n = int(fields["n_params"])
        if len(payload) != 3 * 8 * n:
            raise ValueError("payload length mismatch")
        if fields["kind"] == "lstm":
            arch = LstmArch(int(fields["n_features"]), int(fields["hidden"]))
        elif fields["kind"] == "cnn":
            arch = CnnArch(
                **{k: int(fields[k]) for k in ("n_features", "window_len", "kernel", "stride", "filters", "n_pointwise")}
            )
        else:
            raise ValueError(f"unknown arch kind {fields['kind']!r}")
        arrays = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(3, n)
        meta = {k[5:]: _parse_scalar(v) for k, v in fields.items() if k.startswith("meta.")}
        return ModelState(
            arch=arch,
            params=arrays[0].copy(),
            m=arrays[1].copy(),
            v=arrays[2].copy(),
            seed=int(fields["seed"]),
            step=int(fields["step"]),
            meta=meta,
        )
    except (OSError, ValueError, KeyError, UnicodeDecodeError) as exc:
        raise ResumeError(f"cannot load weights from {path}: {exc}", phase=phase) from exc


def _parse_scalar(text):
    try:
        return int(text)
    except ValueError:
        return text
