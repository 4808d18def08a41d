"""Encoder-decoder segmentation networks with optional temporal-prior fusion.

All variants share one backbone: four encoder stages of
conv(k) -> relu -> 2x2 max-pool, and four decoder stages of
max-unpool (indices from the mirror encoder stage) -> conv(k) -> relu,
followed by a 1x1 classifier.

* ``baseline``  -- current frame only.
* ``stacked``   -- prior and current frames concatenated channel-wise.
* ``embed``     -- both frames pass through the shared encoder; the two
  bottleneck maps are merged by one fusion module before decoding.
* ``decoder``   -- both frames also pass through the shared decoder and a
  fusion module merges the two branches at the input of every decoder stage
  (the first of these sites is the bottleneck).

A fusion module computes ``W_out * tanh(W_prior * e_prior + W_image * e_image)``
where each ``*`` is a same-padded convolution.
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from pfseg.tensor import (
    IndexMap,
    ShapeError,
    Tensor,
    add,
    concat_channels,
    conv2d,
    max_pool2d,
    max_unpool2d,
    relu,
    tanh,
)

VARIANTS = ("baseline", "stacked", "embed", "decoder")
PRIOR_VARIANTS = ("stacked", "embed", "decoder")

_ALIASES = {
    "baselineencdec": "baseline",
    "stackedprior": "stacked",
    "embeddingprior": "embed",
    "embedprior": "embed",
    "embedding": "embed",
    "decoderprior": "decoder",
}


def canonical_variant(name: str) -> str:
    key = name.strip().lower().replace("_", "").replace("-", "")
    key = _ALIASES.get(key, key)
    if key not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; expected one of {', '.join(VARIANTS)}")
    return key


@dataclass
class ModelSpec:
    variant: str = "baseline"
    num_classes: int = 11
    input_channels: Optional[int] = None
    encoder_widths: Tuple[int, ...] = (64, 128, 256, 512)
    decoder_widths: Tuple[int, ...] = (256, 128, 64, 64)
    backbone_kernel: int = 7
    fusion_kernel: int = 3
    fusion_bias: bool = False

    def __post_init__(self):
        self.variant = canonical_variant(self.variant)
        self.encoder_widths = tuple(int(w) for w in self.encoder_widths)
        self.decoder_widths = tuple(int(w) for w in self.decoder_widths)
        if self.input_channels is None:
            self.input_channels = 6 if self.variant == "stacked" else 3
        self.validate()

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.encoder_widths) != 4 or len(self.decoder_widths) != 4:
            raise ValueError(
                "the backbone has eight conv layers: encoder_widths and decoder_widths need 4 entries each, "
                f"got {len(self.encoder_widths)} and {len(self.decoder_widths)}"
            )
        if min(self.encoder_widths + self.decoder_widths) < 1:
            raise ValueError("layer widths must be positive")
        if (self.variant == "stacked") != (self.input_channels == 6):
            raise ValueError(f"variant {self.variant!r} is incompatible with input_channels={self.input_channels}")
        if self.variant != "stacked" and self.input_channels != 3:
            raise ValueError(f"variant {self.variant!r} needs 3 input channels")
        for k, label in ((self.backbone_kernel, "backbone_kernel"), (self.fusion_kernel, "fusion_kernel")):
            if k < 1 or k % 2 == 0:
                raise ValueError(f"{label} must be a positive odd integer, got {k}")

    @property
    def uses_prior(self) -> bool:
        return self.variant in PRIOR_VARIANTS

    def decoder_inputs(self) -> Tuple[int, ...]:
        """Channel count entering each decoder stage."""
        return (self.encoder_widths[-1],) + self.decoder_widths[:-1]

    def fusion_sites(self) -> Tuple[int, ...]:
        """Channel width of each fusion module, in decoder order."""
        if self.variant == "embed":
            return (self.encoder_widths[-1],)
        if self.variant == "decoder":
            return self.decoder_inputs()
        return ()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_widths"] = list(self.encoder_widths)
        d["decoder_widths"] = list(self.decoder_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


def _param_seed(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed & 0xFFFFFFFF, zlib.crc32(name.encode())])


@dataclass
class Model:
    """A built network: spec, named parameter registry, and layer plan.

    The prior and image branches look up the same registry entries, so a
    shared weight has exactly one storage location.
    """

    spec: ModelSpec
    params: Dict[str, Tensor]
    plan: List[Tuple[str, str, int, int, int]] = field(default_factory=list)
    seed: int = 0

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def names(self) -> List[str]:
        return sorted(self.params)

    def __call__(self, x1, x0=None) -> Tensor:
        return forward(self, x0, x1)


def layer_plan(spec: ModelSpec) -> List[Tuple[str, str, int, int, int]]:
    """``(name, kind, cin, cout, k)`` for every parameterised layer."""
    k = spec.backbone_kernel
    plan = []
    cin = spec.input_channels
    for i, cout in enumerate(spec.encoder_widths, 1):
        plan.append((f"enc{i}", "conv", cin, cout, k))
        cin = cout
    for i, (ci, co) in enumerate(zip(spec.decoder_inputs(), spec.decoder_widths), 1):
        plan.append((f"dec{i}", "conv", ci, co, k))
    plan.append(("classifier", "conv", spec.decoder_widths[-1], spec.num_classes, 1))
    for i, c in enumerate(spec.fusion_sites()):
        plan.append((f"fusion{i}", "fusion", c, c, spec.fusion_kernel))
    return plan


def build_model(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> Model:
    """Instantiate parameters deterministically from ``seed``.

    Each tensor draws from its own stream keyed on ``(seed, name)``, so the
    backbone of every variant is identical for a given seed.  Backbone convs
    use He-uniform bounds; fusion convs use ``sqrt(3 / fan_in)``.
    """
    if not isinstance(spec, ModelSpec):
        raise TypeError("build_model expects a ModelSpec")
    spec.validate()
    params: Dict[str, Tensor] = {}
    plan = layer_plan(spec)
    for name, kind, cin, cout, k in plan:
        fan_in = cin * k * k
        if kind == "conv":
            bound = np.sqrt(6.0 / fan_in)
            w = _param_seed(seed, f"{name}.weight").uniform(-bound, bound, (cout, cin, k, k))
            params[f"{name}.weight"] = Tensor(w, requires_grad=True, dtype=dtype, name=f"{name}.weight")
            params[f"{name}.bias"] = Tensor(np.zeros(cout), requires_grad=True, dtype=dtype, name=f"{name}.bias")
        else:
            bound = np.sqrt(3.0 / fan_in)
            for part in ("w_prior", "w_image", "w_out"):
                key = f"{name}.{part}"
                w = _param_seed(seed, key).uniform(-bound, bound, (cout, cin, k, k))
                params[key] = Tensor(w, requires_grad=True, dtype=dtype, name=key)
                if spec.fusion_bias:
                    bkey = f"{name}.b_{part[2:]}"
                    params[bkey] = Tensor(np.zeros(cout), requires_grad=True, dtype=dtype, name=bkey)
    return Model(spec, dict(sorted(params.items())), plan, seed)


FUSION_INITS = ("random", "identity")
IDENTITY_GAIN = 0.2


def init_fusion_identity(model: Model, site: str, gain: Optional[float] = None) -> None:
    """Make fusion module ``site`` pass image features through almost unchanged.

    ``w_prior = 0``, ``w_image = gain * I`` and ``w_out = I / gain`` on the
    centre tap, so the module computes ``tanh(gain * e) / gain``, which is
    ``e`` up to a relative error of about ``(gain * e)^2 / 3``.  The prior
    weight starts at zero but still receives gradient.
    """
    gain = IDENTITY_GAIN if gain is None else gain
    p = model.params
    w_image = p[f"{site}.w_image"].data
    c, k = w_image.shape[0], w_image.shape[2]
    eye = np.zeros_like(w_image)
    eye[np.arange(c), np.arange(c), k // 2, k // 2] = 1
    p[f"{site}.w_prior"].data[...] = 0
    w_image[...] = gain * eye
    p[f"{site}.w_out"].data[...] = eye / gain
    for part in ("b_prior", "b_image", "b_out"):
        if f"{site}.{part}" in p:
            p[f"{site}.{part}"].data[...] = 0


# ---------------------------------------------------------------------------
# forward


@dataclass
class FusionModuleParams:
    w_prior: Tensor
    w_image: Tensor
    w_out: Tensor
    b_prior: Optional[Tensor] = None
    b_image: Optional[Tensor] = None
    b_out: Optional[Tensor] = None

    @classmethod
    def from_model(cls, model: Model, site: str) -> "FusionModuleParams":
        p = model.params
        return cls(
            p[f"{site}.w_prior"],
            p[f"{site}.w_image"],
            p[f"{site}.w_out"],
            p.get(f"{site}.b_prior"),
            p.get(f"{site}.b_image"),
            p.get(f"{site}.b_out"),
        )


def fusion_activation(params: FusionModuleParams, e_prior: Tensor, e_image: Tensor) -> Tensor:
    """The bounded intermediate ``tanh(W_prior e_prior + W_image e_image)``."""
    if e_prior.shape != e_image.shape:
        raise ShapeError(f"fusion: prior features {e_prior.shape} vs image features {e_image.shape}")
    c = params.w_image.shape[1]
    if e_image.shape[1] != c:
        raise ShapeError(f"fusion: features have {e_image.shape[1]} channels, module expects {c}")
    pad = (params.w_image.shape[2] - 1) // 2
    return tanh(
        add(
            conv2d(e_prior, params.w_prior, params.b_prior, 1, pad),
            conv2d(e_image, params.w_image, params.b_image, 1, pad),
        )
    )


def fusion_forward(params: FusionModuleParams, e_prior: Tensor, e_image: Tensor) -> Tensor:
    pad = (params.w_out.shape[2] - 1) // 2
    return conv2d(fusion_activation(params, e_prior, e_image), params.w_out, params.b_out, 1, pad)


def _conv(model: Model, name: str, x: Tensor) -> Tensor:
    w = model.params[f"{name}.weight"]
    return conv2d(x, w, model.params[f"{name}.bias"], 1, (w.shape[2] - 1) // 2)


def _centre(x: Tensor) -> Tensor:
    # images live in [0, 1]; shift to [-0.5, 0.5]
    return add(x, Tensor.wrap(np.full(x.shape, -0.5, dtype=x.dtype)))


def encode(model: Model, x: Tensor) -> Tuple[Tensor, List[IndexMap]]:
    indices = []
    for i in range(1, 5):
        x, idx = max_pool2d(relu(_conv(model, f"enc{i}", x)))
        indices.append(idx)
    return x, indices


def decode_stage(model: Model, stage: int, x: Tensor, indices: List[IndexMap]) -> Tensor:
    """Decoder stage 1..4; stage ``s`` unpools with encoder stage ``5 - s`` indices."""
    return relu(_conv(model, f"dec{stage}", max_unpool2d(x, indices[4 - stage])))


def _check_input(model: Model, x: Tensor, what: str) -> None:
    if not isinstance(x, Tensor):
        raise TypeError(f"{what} must be a Tensor")
    if x.data.ndim != 4:
        raise ShapeError(f"{what} must be N x C x H x W, got {x.shape}")
    h, w = x.shape[2:]
    if h % 16 or w % 16:
        raise ShapeError(f"{what}: spatial extents must be divisible by 16, got {h}x{w}")


def forward(model: Model, x0: Optional[Tensor], x1: Tensor) -> Tensor:
    """Logits ``N x num_classes x H x W`` for current frame ``x1`` and prior ``x0``."""
    spec = model.spec
    _check_input(model, x1, "x1")
    if spec.uses_prior:
        if x0 is None:
            raise ValueError(f"variant {spec.variant!r} needs a prior frame")
        _check_input(model, x0, "x0")
        if x0.shape != x1.shape:
            raise ShapeError(f"prior {x0.shape} and current {x1.shape} differ in shape")

    x1 = _centre(x1)
    if x0 is not None:
        x0 = _centre(x0)
    if spec.variant == "baseline":
        h, idx = encode(model, x1)
        for s in range(1, 5):
            h = decode_stage(model, s, h, idx)
    elif spec.variant == "stacked":
        h, idx = encode(model, concat_channels(x0, x1))
        for s in range(1, 5):
            h = decode_stage(model, s, h, idx)
    elif spec.variant == "embed":
        p, _ = encode(model, x0)
        h, idx = encode(model, x1)
        h = fusion_forward(FusionModuleParams.from_model(model, "fusion0"), p, h)
        for s in range(1, 5):
            h = decode_stage(model, s, h, idx)
    else:
        p, pidx = encode(model, x0)
        h, idx = encode(model, x1)
        for s in range(1, 5):
            h = fusion_forward(FusionModuleParams.from_model(model, f"fusion{s - 1}"), p, h)
            h = decode_stage(model, s, h, idx)
            if s < 4:
                p = decode_stage(model, s, p, pidx)
    return conv2d(h, model.params["classifier.weight"], model.params["classifier.bias"])


# ---------------------------------------------------------------------------
# parameter accounting


def count_params(model: Model) -> int:
    return int(sum(t.size for t in model.params.values()))


def param_report(model: Model) -> List[Tuple[str, tuple, int]]:
    """``(name, shape, count)`` rows in sorted name order."""
    return [(name, tuple(model.params[name].shape), int(model.params[name].size)) for name in model.names()]


def closed_form_params(spec: ModelSpec) -> int:
    """Parameter count from the layer plan alone, without allocating weights."""
    total = 0
    for _, kind, cin, cout, k in layer_plan(spec):
        if kind == "conv":
            total += k * k * cin * cout + cout
        else:
            total += 3 * k * k * cin * cout + (3 * cout if spec.fusion_bias else 0)
    return total
