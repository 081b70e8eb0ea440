"""Small fully convolutional classifier with a designated feedback layer.

Topology: a stack of 3x3-ish conv+relu feature layers (strides shrink the
grid), an optional suppression mask multiplied into the feedback layer's
output, head conv+relu layers, and a final 1x1 class conv whose bias-free
output is the per-class heat map. Global average pooling of the heat map
plus the class bias gives the logits, which makes the heat maps exact
class activation maps.
"""

from dataclasses import dataclass

import numpy as np

from . import io as tpio
from . import ops


class ConfigError(ValueError):
    """Raised on invalid model configuration."""


@dataclass(frozen=True)
class FcnConfig:
    input_size: int = 64
    class_count: int = 4
    # (out_channels, kernel, stride) per conv layer
    feature_stack: tuple = ((16, 3, 1), (16, 3, 2), (32, 3, 1), (32, 3, 2))
    feedback_layer_index: int = 3
    head_stack: tuple = ((64, 3, 1), (4, 1, 1))
    input_channels: int = 1
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "feature_stack", tuple(tuple(l) for l in self.feature_stack))
        object.__setattr__(self, "head_stack", tuple(tuple(l) for l in self.head_stack))

    def validate(self):
        if self.class_count < 2:
            raise ConfigError(f"class_count must be >= 2, got {self.class_count}")
        if not self.feature_stack or not self.head_stack:
            raise ConfigError("feature_stack and head_stack must be non-empty")
        for oc, k, s in self.feature_stack + self.head_stack:
            if k % 2 != 1:
                raise ConfigError(f"kernel sizes must be odd, got {k}")
            if oc < 1 or s < 1:
                raise ConfigError(f"bad layer spec ({oc},{k},{s})")
        if not 0 <= self.feedback_layer_index < len(self.feature_stack):
            raise ConfigError(
                f"feedback_layer_index {self.feedback_layer_index} out of range "
                f"for {len(self.feature_stack)} feature layers")
        if self.head_stack[-1][0] != self.class_count:
            raise ConfigError(
                f"last head layer must output class_count={self.class_count} channels, "
                f"got {self.head_stack[-1][0]}")

    @classmethod
    def default(cls, class_count=4, rng_seed=0):
        return cls(class_count=class_count,
                   head_stack=((64, 3, 1), (class_count, 1, 1)),
                   rng_seed=rng_seed)

    def layer_specs(self):
        """All conv layers in order: (out_ch, kernel, stride, is_head_last)."""
        layers = []
        stacks = [(self.feature_stack, False), (self.head_stack, True)]
        for stack, is_head in stacks:
            for i, (oc, k, s) in enumerate(stack):
                layers.append((oc, k, s, is_head and i == len(stack) - 1))
        return layers

    def spatial_sizes(self):
        """Spatial extent after each conv layer (same padding, stride division)."""
        sizes = []
        h = self.input_size
        for oc, k, s, _ in self.layer_specs():
            h = (h + 2 * (k // 2) - k) // s + 1
            sizes.append(h)
        return sizes

    def feedback_size(self):
        return self.spatial_sizes()[self.feedback_layer_index]

    def heatmap_size(self):
        return self.spatial_sizes()[-1]

    def to_dict(self):
        return {
            "input_size": self.input_size,
            "class_count": self.class_count,
            "feature_stack": [list(l) for l in self.feature_stack],
            "feedback_layer_index": self.feedback_layer_index,
            "head_stack": [list(l) for l in self.head_stack],
            "input_channels": self.input_channels,
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(input_size=d["input_size"], class_count=d["class_count"],
                   feature_stack=tuple(tuple(l) for l in d["feature_stack"]),
                   feedback_layer_index=d["feedback_layer_index"],
                   head_stack=tuple(tuple(l) for l in d["head_stack"]),
                   input_channels=d["input_channels"], rng_seed=d["rng_seed"])


@dataclass
class FcnModel:
    config: FcnConfig
    params: list  # [(weight, bias), ...] in layer order

    def copy(self):
        return FcnModel(self.config, [(w.copy(), b.copy()) for w, b in self.params])

    def checksum(self):
        import hashlib
        h = hashlib.sha256()
        for w, b in self.params:
            h.update(np.ascontiguousarray(w).tobytes())
            h.update(np.ascontiguousarray(b).tobytes())
        return h.hexdigest()


@dataclass
class HeatMapSet:
    maps: np.ndarray   # (class_count, h, w), bias-free class responses
    probs: np.ndarray  # (class_count,)
    phase: int = 1


@dataclass
class ForwardResult:
    features_at_feedback: np.ndarray
    head_features: np.ndarray
    class_maps: np.ndarray
    logits: np.ndarray
    probs: np.ndarray


def init_model(config: FcnConfig) -> FcnModel:
    """He-style fan-in Gaussian weights, zero biases, deterministic in seed."""
    config.validate()
    rng = np.random.default_rng(config.rng_seed)
    params = []
    ic = config.input_channels
    for oc, k, s, _ in config.layer_specs():
        fan_in = ic * k * k
        std = np.sqrt(2.0 / fan_in)
        w = (rng.standard_normal((oc, ic, k, k)) * std).astype(np.float32)
        b = np.zeros(oc, dtype=np.float32)
        params.append((w, b))
        ic = oc
    return FcnModel(config, params)


def _run_forward(model, batch, mask, keep_caches):
    cfg = model.config
    specs = cfg.layer_specs()
    x = batch
    caches = []
    feedback = None
    head_features = None
    for idx, ((w, b), (oc, k, s, is_last)) in enumerate(zip(model.params, specs)):
        pre, conv_cache = ops.conv2d_forward(x, w, b if not is_last else np.zeros_like(b),
                                             stride=s, pad=k // 2)
        if is_last:
            out = pre  # class-map layer: linear, bias folded in after GAP
        else:
            out = ops.relu(pre)
        masked_here = (not is_last) and idx == cfg.feedback_layer_index and mask is not None
        if idx == cfg.feedback_layer_index:
            feedback = out
        if masked_here:
            out = ops.masked_multiply(out, mask)
        if keep_caches:
            caches.append((conv_cache, pre, masked_here))
        if is_last:
            class_maps = out
        else:
            x = out
            if idx == len(specs) - 2:
                head_features = out
    bias_c = model.params[-1][1]
    logits = ops.global_average_pool(class_maps) + bias_c
    probs = ops.sigmoid(logits).astype(class_maps.dtype)
    result = ForwardResult(feedback, head_features, class_maps, logits, probs)
    return result, caches


def forward(model: FcnModel, batch, mask=None) -> ForwardResult:
    """Pure forward pass; ``mask`` (if given) multiplies the feedback layer.

    ``batch`` is (n, c, H, W) with H = W = config.input_size; ``mask`` is
    (h, w) or (n, h, w) at the feedback layer's resolution.
    """
    _validate_batch(model, batch, mask)
    return _run_forward(model, batch, mask, keep_caches=False)[0]


def _validate_batch(model, batch, mask):
    cfg = model.config
    if batch.ndim != 4 or batch.shape[1] != cfg.input_channels \
            or batch.shape[2] != cfg.input_size or batch.shape[3] != cfg.input_size:
        raise ops.ShapeError(
            f"forward: batch shape {batch.shape} does not match configured input "
            f"({cfg.input_channels},{cfg.input_size},{cfg.input_size})")
    if mask is not None:
        fs = cfg.feedback_size()
        m = np.asarray(mask)
        spatial = m.shape[-2:]
        if spatial != (fs, fs):
            raise ops.ShapeError(
                f"forward: mask spatial shape {spatial} does not match feedback "
                f"layer resolution ({fs},{fs})")


def loss_and_grads(model: FcnModel, batch, labels, mask=None):
    """Multi-label loss plus analytic gradients for all parameters and the input.

    Returns (loss, grads, grad_input, forward_result) where grads mirrors
    model.params as [(grad_w, grad_b), ...].
    """
    _validate_batch(model, batch, mask)
    cfg = model.config
    result, caches = _run_forward(model, batch, mask, keep_caches=True)
    loss = ops.multilabel_logistic_loss(result.logits, labels)
    dlogits = ops.multilabel_logistic_loss_grad(result.logits, labels)

    h = result.class_maps.shape[2]
    grads = [None] * len(model.params)
    # class-map layer: d(maps) from GAP, bias grad straight from dlogits
    g = ops.global_average_pool_backward(dlogits, result.class_maps.shape[2:])
    for idx in range(len(model.params) - 1, -1, -1):
        conv_cache, pre, masked_here = caches[idx]
        is_last = idx == len(model.params) - 1
        if masked_here:
            g = ops.masked_multiply_backward(g, mask)
        if not is_last:
            g = ops.relu_backward(g, pre)
        g, gw, gb = ops.conv2d_backward(g, conv_cache)
        if is_last:
            gb = dlogits.sum(axis=0)
        grads[idx] = (gw, gb)
    return loss, grads, g, result


def compute_heatmaps(model: FcnModel, image, phase=1) -> HeatMapSet:
    """Per-class heat maps and probabilities for one image (no suppression)."""
    if image.ndim == 3:
        image = image[None]
    res = forward(model, image)
    return HeatMapSet(maps=res.class_maps[0].copy(), probs=res.probs[0].copy(), phase=phase)


def cam_from_classifier_weights(model: FcnModel, head_features):
    """Heat maps as the classifier-weight-weighted sum of final feature channels.

    Requires a 1x1 class-map layer; must agree with the class maps from the
    conv pathway.
    """
    w, _ = model.params[-1]
    if w.shape[2:] != (1, 1):
        raise ConfigError("weighted-sum heat maps require a 1x1 class-map layer")
    return np.einsum("ck,nkhw->nchw", w.reshape(w.shape[0], w.shape[1]), head_features)


# ---------------------------------------------------------------------------
# checkpoints

def save_model(path, model: FcnModel):
    tpio.save_checkpoint(path, model.config.to_dict(), model.params)


def load_model(path) -> FcnModel:
    config_dict, params = tpio.load_checkpoint(path)
    config = FcnConfig.from_dict(config_dict)
    config.validate()
    model = FcnModel(config, params)
    expected = len(config.layer_specs())
    if len(params) != expected:
        raise tpio.FormatError(
            f"{path}: expected {expected} parameter pairs, found {len(params)}")
    return model
