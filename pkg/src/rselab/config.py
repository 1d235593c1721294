"""Flat key=value config grammar shared by the CLI and checkpoint headers.

One `key=value` per line, `#` starts a comment, blank lines ignored, UTF-8.
Consumers reject unknown keys. Model architectures serialize into the same
grammar with `layer.<i>` keys whose value is `kind,attr=value,...`.
"""

from __future__ import annotations

from .errors import ConfigurationError, UsageError
from .layers import LayerSpec, ModelConfig, NoiseSpec


def parse_kv(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"line {lineno}: expected key=value, got '{raw.strip()}'")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise UsageError(f"line {lineno}: empty key")
        if key in out:
            raise UsageError(f"line {lineno}: duplicate key '{key}'")
        out[key] = value.strip()
    return out


def format_kv(items: dict) -> str:
    return "".join(f"{k}={v}\n" for k, v in items.items())


def reject_unknown(cfg: dict, allowed, context: str):
    unknown = [k for k in cfg if k not in allowed]
    if unknown:
        raise UsageError(f"{context}: unknown key(s) {', '.join(sorted(unknown))}")


# ---------------------------------------------------------------------------
# ModelConfig <-> text

_LAYER_ATTRS = {
    "noise": ("family", "sigma", "bernoulli_p", "placement"),
    "conv2d": ("channels", "kernel", "stride", "padding"),
    "dense": ("units",),
    "relu": (),
    "brelu": (),
    "maxpool": ("size",),
    "flatten": (),
    "softmax_temperature": ("temperature",),
}


def _layer_to_text(spec: LayerSpec) -> str:
    parts = [spec.kind]
    if spec.kind == "noise":
        ns = spec.noise
        parts += [f"family={ns.family}", f"sigma={ns.sigma!r}",
                  f"bernoulli_p={ns.bernoulli_p!r}", f"placement={ns.placement}"]
    elif spec.kind == "conv2d":
        parts += [f"channels={spec.channels}", f"kernel={spec.kernel}",
                  f"stride={spec.stride}", f"padding={spec.padding}"]
    elif spec.kind == "dense":
        parts.append(f"units={spec.units}")
    elif spec.kind == "maxpool":
        parts.append(f"size={spec.size}")
    elif spec.kind == "softmax_temperature":
        parts.append(f"temperature={spec.temperature!r}")
    return ",".join(parts)


def _layer_from_text(text: str, context: str) -> LayerSpec:
    fields = text.split(",")
    kind = fields[0]
    if kind not in _LAYER_ATTRS:
        raise ConfigurationError(f"{context}: unknown layer kind '{kind}'")
    attrs = {}
    for item in fields[1:]:
        if "=" not in item:
            raise ConfigurationError(f"{context}: malformed attribute '{item}'")
        k, v = item.split("=", 1)
        if k not in _LAYER_ATTRS[kind]:
            raise ConfigurationError(f"{context}: attribute '{k}' not valid for {kind}")
        attrs[k] = v
    try:
        if kind == "noise":
            return LayerSpec(kind="noise", noise=NoiseSpec(
                family=attrs.get("family", "gaussian"),
                sigma=float(attrs.get("sigma", 0.0)),
                bernoulli_p=float(attrs.get("bernoulli_p", 1.0)),
                placement=attrs.get("placement", "inner")))
        if kind == "conv2d":
            return LayerSpec(kind="conv2d", channels=int(attrs["channels"]),
                             kernel=int(attrs["kernel"]), stride=int(attrs.get("stride", 1)),
                             padding=int(attrs.get("padding", 0)))
        if kind == "dense":
            return LayerSpec(kind="dense", units=int(attrs["units"]))
        if kind == "maxpool":
            return LayerSpec(kind="maxpool", size=int(attrs.get("size", 2)))
        if kind == "softmax_temperature":
            return LayerSpec(kind="softmax_temperature",
                             temperature=float(attrs["temperature"]))
    except (KeyError, ValueError) as e:
        raise ConfigurationError(f"{context}: {e}") from e
    return LayerSpec(kind=kind)


def model_config_to_text(config: ModelConfig) -> str:
    items = {
        "input_shape": ",".join(str(d) for d in config.input_shape),
        "classes": str(config.classes),
    }
    for i, spec in enumerate(config.layers):
        items[f"layer.{i}"] = _layer_to_text(spec)
    return format_kv(items)


def model_config_from_text(text: str) -> ModelConfig:
    cfg = parse_kv(text)
    try:
        input_shape = tuple(int(d) for d in cfg.pop("input_shape").split(","))
        classes = int(cfg.pop("classes"))
    except (KeyError, ValueError) as e:
        raise ConfigurationError(f"model config header: {e}") from e
    layers = []
    i = 0
    while f"layer.{i}" in cfg:
        layers.append(_layer_from_text(cfg.pop(f"layer.{i}"), f"layer.{i}"))
        i += 1
    if cfg:
        raise ConfigurationError(f"model config: unknown key(s) {', '.join(sorted(cfg))}")
    return ModelConfig(input_shape=input_shape, layers=tuple(layers), classes=classes)
