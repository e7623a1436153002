"""Small convolutional backbone with the supervised and auxiliary heads.

One :class:`SSLNet` carries every head so that a single parameter set can be
trained in any mode; the shared trunk receives gradients from every branch.
"""

from __future__ import annotations

import hashlib
import json
import struct
import warnings
import zlib
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor

__all__ = [
    "ModelSpec",
    "SSLNet",
    "CheckpointError",
    "save_checkpoint",
    "load_checkpoint",
]

MAGIC = b"SSLFGVC1"
FEATURE_DIM = 64


def _init(seed: int, name: str, shape, fan_in: int | None) -> np.ndarray:
    if fan_in is None:
        return np.zeros(shape)
    rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Conv2d:
    def __init__(self, name: str, c_in: int, c_out: int, kernel: int, padding: int, seed: int):
        self.padding = padding
        self.weight = Parameter(_init(seed, f"{name}.weight", (c_out, c_in, kernel, kernel),
                                      c_in * kernel * kernel), f"{name}.weight")
        self.bias = Parameter(np.zeros(c_out), f"{name}.bias")

    def parameters(self):
        return [self.weight, self.bias]

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias, padding=self.padding)


class Linear:
    def __init__(self, name: str, n_in: int, n_out: int, seed: int):
        self.weight = Parameter(_init(seed, f"{name}.weight", (n_in, n_out), n_in), f"{name}.weight")
        self.bias = Parameter(np.zeros(n_out), f"{name}.bias")

    def parameters(self):
        return [self.weight, self.bias]

    def __call__(self, x):
        return T.matmul(x, self.weight) + self.bias


@dataclass(frozen=True)
class ModelSpec:
    num_classes: int
    variant: str = "standard"  # "standard" or "cam"
    rcm_k: int = 4
    loc_mode: str = "mse"  # "mse", "l1" or "bce"
    embed_dim: int = 32
    num_patches: int = 9
    seed: int = 0

    def __post_init__(self):
        if self.variant not in ("standard", "cam"):
            raise ValueError(f"unknown model variant {self.variant!r}")
        if self.loc_mode not in ("mse", "l1", "bce"):
            raise ValueError(f"unknown location mode {self.loc_mode!r}")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")


class SSLNet:
    """Backbone ``3→16→32→64`` (3×3 convs, two max-pools) plus heads.

    Heads: ``cls`` (N scores), ``rot`` (4), ``adv`` (2, original vs
    deconstructed), ``loc`` (1×1 conv pooled to k×k, tanh), ``pirl_f`` and
    ``pirl_g`` projections, and ``cam`` (1×1 conv to N class activation maps).
    """

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        s, n = spec.seed, spec.num_classes
        self.conv1 = Conv2d("backbone.conv1", 3, 16, 3, 1, s)
        self.conv2 = Conv2d("backbone.conv2", 16, 32, 3, 1, s)
        self.conv3 = Conv2d("backbone.conv3", 32, FEATURE_DIM, 3, 1, s)
        self.cls = Linear("heads.cls", FEATURE_DIM, n, s)
        self.rot = Linear("heads.rot", FEATURE_DIM, 4, s)
        self.adv = Linear("heads.adv", FEATURE_DIM, 2, s)
        loc_out = spec.rcm_k ** 2 if spec.loc_mode == "bce" else 2
        self.loc = Conv2d("heads.loc", FEATURE_DIM, loc_out, 1, 0, s)
        self.pirl_f = Linear("heads.pirl_f", FEATURE_DIM, spec.embed_dim, s)
        self.pirl_g = Linear("heads.pirl_g", FEATURE_DIM * spec.num_patches, spec.embed_dim, s)
        self.cam = Conv2d("heads.cam", FEATURE_DIM, n, 1, 0, s)
        self.training = True

    # -- parameters -------------------------------------------------------
    def parameters(self) -> list[Parameter]:
        params = []
        for layer in (self.conv1, self.conv2, self.conv3, self.cls, self.rot, self.adv,
                      self.loc, self.pirl_f, self.pirl_g, self.cam):
            params.extend(layer.parameters())
        return params

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "SSLNet":
        self.training = mode
        return self

    def eval(self) -> "SSLNet":
        return self.train(False)

    # -- forward pieces ---------------------------------------------------
    def features(self, x) -> Tensor:
        """``B×3×H×W → B×64×H/4×W/4`` with weights shared by every branch."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 4 or x.shape[2] % 4 or x.shape[3] % 4:
            raise ValueError(f"backbone needs B×3×H×W with H, W divisible by 4, got {x.shape}")
        h = T.max_pool2(T.relu(self.conv1(x)))
        h = T.max_pool2(T.relu(self.conv2(h)))
        return T.relu(self.conv3(h))

    def pooled(self, features: Tensor) -> Tensor:
        return T.global_avg_pool(features)

    def cams(self, features: Tensor) -> Tensor:
        if self.spec.variant != "cam":
            raise ValueError("cam_forward needs the CAM model variant")
        return self.cam(features)

    def class_scores(self, features: Tensor, suppress=None) -> Tensor:
        """Classifier scores; ``suppress`` maps CAMs to suppressed CAMs (CAM variant)."""
        if self.spec.variant == "cam":
            a = self.cams(features)
            if suppress is not None:
                a = suppress(a)
            return T.global_avg_pool(a)
        return self.cls(self.pooled(features))

    def logits(self, x) -> Tensor:
        return self.class_scores(self.features(x))

    def rotation_scores(self, features: Tensor) -> Tensor:
        return self.rot(self.pooled(features))

    def adversarial_scores(self, features: Tensor) -> Tensor:
        return self.adv(self.pooled(features))

    def location_map(self, features: Tensor) -> Tensor:
        """``B×k×k×2`` tanh coordinates (regression) or ``B×k×k×k²`` logits (bce)."""
        k = self.spec.rcm_k
        m = T.avg_pool(self.loc(features), (k, k))
        m = T.transpose(m, (0, 2, 3, 1))
        return m if self.spec.loc_mode == "bce" else T.tanh(m)

    def pirl_embed(self, images, patches, features: Tensor | None = None) -> tuple[Tensor, Tensor]:
        """Unit-norm embeddings of images and of their concatenated patch features.

        ``patches`` is ``B×n×3×p×p``; patch features keep patch order. Pass
        ``features`` to reuse an existing backbone pass over ``images``.
        """
        patches = np.asarray(patches.data if isinstance(patches, Tensor) else patches)
        if patches.ndim != 5:
            raise ValueError("patches must be B×n×3×p×p")
        b, n = patches.shape[:2]
        if n != self.spec.num_patches:
            raise ValueError(f"model expects {self.spec.num_patches} patches per image, got {n}")
        if features is None:
            features = self.features(images)
        v_i = T.l2_normalize(self.pirl_f(self.pooled(features)), axis=1)
        pf = self.pooled(self.features(patches.reshape(b * n, *patches.shape[2:])))
        v_t = T.l2_normalize(self.pirl_g(T.reshape(pf, (b, n * FEATURE_DIM))), axis=1)
        return v_i, v_t

    def cam_forward(self, x, suppress=None) -> tuple[Tensor, Tensor]:
        """Return CAMs and the scores obtained by averaging (suppressed) CAMs."""
        a = self.cams(self.features(x))
        a2 = suppress(a) if suppress is not None else a
        return a, T.global_avg_pool(a2)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

class CheckpointError(ValueError):
    pass


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def _pack_str(s: str) -> bytes:
    b = s.encode()
    return struct.pack("<I", len(b)) + b


def save_checkpoint(model: SSLNet, path, epoch: int = 0, config_digest: str = "") -> None:
    """Binary layout (little-endian)::

        "SSLFGVC1" | u32 epoch | str config hash | str model spec json | u32 count
        count × (str name | u32 ndim | ndim × u32 dim | float32 payload)

    where ``str`` is a u32 byte length followed by UTF-8 bytes.
    """
    params = model.parameters()
    out = [MAGIC, struct.pack("<I", epoch), _pack_str(config_digest),
           _pack_str(json.dumps(asdict(model.spec), sort_keys=True)), struct.pack("<I", len(params))]
    for p in params:
        out.append(_pack_str(p.name))
        out.append(struct.pack("<I", p.data.ndim) + struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        out.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(out))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated payload")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode()


def read_checkpoint(path) -> tuple[int, str, dict, list[tuple[str, np.ndarray]]]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:len(MAGIC)] != MAGIC:
        raise CheckpointError("bad magic: not an SSLFGVC1 checkpoint")
    r = _Reader(buf)
    r.take(len(MAGIC))
    epoch = r.u32()
    digest = r.string()
    spec = json.loads(r.string())
    records = []
    for _ in range(r.u32()):
        name = r.string()
        shape = struct.unpack(f"<{(nd := r.u32())}I", r.take(4 * nd))
        count = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape)
        records.append((name, data))
    return epoch, digest, spec, records


def load_checkpoint(path, model: SSLNet | None = None, config_digest: str | None = None) -> SSLNet:
    """Load parameters into ``model`` (or a model rebuilt from the stored spec)."""
    epoch, digest, spec, records = read_checkpoint(path)
    if model is None:
        model = SSLNet(ModelSpec(**spec))
    if config_digest is not None and digest != config_digest:
        warnings.warn(f"checkpoint config hash {digest[:12]} differs from {config_digest[:12]}")
    params = model.named_parameters()
    for name, data in records:
        if name not in params:
            raise CheckpointError(f"unknown parameter {name!r}")
        p = params[name]
        if p.data.shape != data.shape:
            raise CheckpointError(f"shape mismatch for {name!r}: checkpoint {data.shape}, model {p.data.shape}")
        p.data = data.astype(p.data.dtype)
        p.momentum_buffer = np.zeros_like(p.data)
    missing = set(params) - {n for n, _ in records}
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)}")
    model.epoch = epoch
    return model
