"""Import pretrained torchvision-style densenet checkpoints.

The converter maps a torchvision DenseNet state dict onto this package's
parameter names and writes the model file, together with reference logits
recorded on a fixed probe image so the import can be verified end to end.

The reference logits are computed with torch ops arranged exactly like this
package's graph (in particular: no ReLU inside transition layers), so any
disagreement after loading points at a kernel-level discrepancy rather than
an architecture mismatch.

torch is an optional dependency, imported lazily.
"""
from __future__ import annotations

import json

import numpy as np

from .errors import ConfigError
from .net import ModelConfig, Network
from .ops import BNState

_NAME_MAP_STATIC = {
    "features.conv0.weight": "stem.conv.weight",
    "features.norm0.weight": "stem.bn.gamma",
    "features.norm0.bias": "stem.bn.beta",
    "features.norm0.running_mean": "stem.bn.running_mean",
    "features.norm0.running_var": "stem.bn.running_var",
    "classifier.weight": "classifier.weight",
    "classifier.bias": "classifier.bias",
}


def _bn_map(src: str, dst: str) -> dict:
    return {
        f"{src}.weight": f"{dst}.gamma",
        f"{src}.bias": f"{dst}.beta",
        f"{src}.running_mean": f"{dst}.running_mean",
        f"{src}.running_var": f"{dst}.running_var",
    }


def name_map(config: ModelConfig) -> dict:
    """torchvision state-dict key -> this package's tensor name."""
    mapping = dict(_NAME_MAP_STATIC)
    for b, layers in enumerate(config.block_layout):
        for l in range(layers):
            src = f"features.denseblock{b + 1}.denselayer{l + 1}"
            dst = f"block{b}.layer{l}"
            mapping.update(_bn_map(f"{src}.norm1", f"{dst}.bn1"))
            mapping.update(_bn_map(f"{src}.norm2", f"{dst}.bn2"))
            mapping[f"{src}.conv1.weight"] = f"{dst}.conv1.weight"
            mapping[f"{src}.conv2.weight"] = f"{dst}.conv2.weight"
        if b < len(config.block_layout) - 1:
            src = f"features.transition{b + 1}"
            mapping.update(_bn_map(f"{src}.norm", f"trans{b}.bn"))
            mapping[f"{src}.conv.weight"] = f"trans{b}.conv.weight"
    mapping.update(_bn_map("features.norm5", "head.bn"))
    return mapping


def from_torch_state(state_dict, config: ModelConfig) -> Network:
    """Build a Network from a torchvision densenet state dict."""
    net = Network(config)
    mapping = name_map(config)
    tensors = {}
    for src, value in state_dict.items():
        if src.endswith("num_batches_tracked"):
            continue
        if src not in mapping:
            raise ConfigError(f"unexpected checkpoint tensor {src!r}; "
                              "config does not describe this architecture")
        tensors[mapping[src]] = np.asarray(value.detach().cpu().numpy()
                                           if hasattr(value, "detach") else value,
                                           dtype=np.float32)
    missing = [n for n in net.param_names() if n not in tensors]
    if missing:
        raise ConfigError(f"checkpoint is missing tensors for {missing[:4]}...")
    for name in net.param_names():
        net.params[name] = tensors[name]
        net.trainable[name] = True
    for pname in net.param_names():
        if not pname.endswith(".gamma"):
            continue
        bn = pname[: -len(".gamma")]
        st = BNState(tensors[f"{bn}.running_mean"].size)
        st.running_mean = tensors[f"{bn}.running_mean"]
        st.running_var = tensors[f"{bn}.running_var"]
        st.initialized = True
        net.bn_states[bn] = st
    return net


def reference_logits(state_dict, config: ModelConfig, x: np.ndarray) -> np.ndarray:
    """Torch-computed logits for the probe batch, arranged like our graph."""
    import torch
    import torch.nn.functional as F

    sd = {k: (v if isinstance(v, torch.Tensor) else torch.tensor(v))
          for k, v in state_dict.items()}
    t = torch.from_numpy(np.ascontiguousarray(x))

    def bn(v, prefix):
        return F.batch_norm(v, sd[f"{prefix}.running_mean"], sd[f"{prefix}.running_var"],
                            sd[f"{prefix}.weight"], sd[f"{prefix}.bias"],
                            training=False, eps=1e-5)

    with torch.no_grad():
        if config.stem == "full":
            t = F.conv2d(t, sd["features.conv0.weight"], stride=2, padding=3)
            t = F.relu(bn(t, "features.norm0"))
            t = F.max_pool2d(t, kernel_size=3, stride=2, padding=1)
        else:
            t = F.conv2d(t, sd["features.conv0.weight"], stride=1, padding=1)
            t = F.relu(bn(t, "features.norm0"))
        for b, layers in enumerate(config.block_layout):
            for l in range(layers):
                p = f"features.denseblock{b + 1}.denselayer{l + 1}"
                h = F.relu(bn(t, f"{p}.norm1"))
                h = F.conv2d(h, sd[f"{p}.conv1.weight"])
                h = F.relu(bn(h, f"{p}.norm2"))
                h = F.conv2d(h, sd[f"{p}.conv2.weight"], padding=1)
                t = torch.cat([t, h], dim=1)
            if b < len(config.block_layout) - 1:
                p = f"features.transition{b + 1}"
                t = bn(t, f"{p}.norm")  # no relu inside transitions
                t = F.conv2d(t, sd[f"{p}.conv.weight"])
                t = F.avg_pool2d(t, kernel_size=2, stride=2)
        t = F.relu(bn(t, "features.norm5"))
        t = t.mean(dim=(2, 3))
        t = t @ sd["classifier.weight"].T + sd["classifier.bias"]
    return t.numpy()


def probe_image(config: ModelConfig, seed: int = 1234) -> np.ndarray:
    """Deterministic probe batch used to record reference logits."""
    c, h, w = config.input_size
    rng = np.random.default_rng(seed)
    return rng.standard_normal((1, c, h, w)).astype(np.float32)


def convert_checkpoint(state_dict, config: ModelConfig, out_path,
                       reference_path=None) -> Network:
    """Convert, save, and (optionally) record reference logits."""
    from . import modelio

    net = from_torch_state(state_dict, config)
    modelio.save(net, out_path)
    if reference_path is not None:
        x = probe_image(config)
        ref = reference_logits(state_dict, config, x)
        with open(reference_path, "w", encoding="utf-8") as f:
            json.dump({"probe_seed": 1234, "logits": ref.tolist()}, f)
            f.write("\n")
    return net
